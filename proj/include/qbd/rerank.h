#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "qbd/corpus.h"
#include "qbd/llm_gateway.h"
#include "qbd/metrics.h"

namespace qbd {

// A reranking method. Instructions turn scs_llm into scs_instr and pcs_llm
// into pcs_instr; they are not allowed with scs_emb.
struct RerankMethod {
  RerankKind kind = RerankKind::pcs_llm;
  std::optional<std::string> instructions;
  // Version of the instructions document the text came from, 0 if none.
  long instructions_version = 0;

  std::string name() const;
  bool pairwise() const { return kind == RerankKind::pcs_llm; }

  friend bool operator==(const RerankMethod&, const RerankMethod&) = default;
};

// Accepts scs_emb, scs_llm, scs_instr, pcs_llm, pcs_instr. The *_instr
// names require instructions.
RerankMethod parse_method(std::string_view name, std::optional<std::string> instructions = {},
                          long instructions_version = 0);
void validate(const RerankMethod& method);

// Fills {{name}} placeholders. Unknown placeholders are an error.
std::string render_template(std::string_view text,
                            const std::map<std::string, std::string>& values);

// Prompt templates with {{query}}, {{candidate}}, {{candidate_a}},
// {{candidate_b}} and {{instructions}} placeholders. Absent instructions
// render as the empty string.
struct PromptTemplates {
  std::string single;
  std::string pairwise;

  static PromptTemplates defaults();
  // Reads single.txt and pairwise.txt from `dir`; a missing file keeps the
  // built-in default.
  static PromptTemplates load(const std::filesystem::path& dir);

  std::string render_single(const std::string& query, const std::string& candidate,
                            const std::optional<std::string>& instructions) const;
  std::string render_pair(const std::string& query, const std::string& candidate_a,
                          const std::string& candidate_b,
                          const std::optional<std::string>& instructions) const;
};

struct CandidateScore {
  std::string doc_id;
  double score = 0.0;
  std::optional<std::string> explanation;

  friend bool operator==(const CandidateScore&, const CandidateScore&) = default;
};

struct PairVerdict {
  std::string doc_first;
  std::string doc_second;
  int verdict = 0;  // +1: first is the better match, -1: worse, 0: neither
  std::optional<std::string> explanation;
  bool flagged = false;  // reply could not be used; verdict forced to 0

  friend bool operator==(const PairVerdict&, const PairVerdict&) = default;
};

struct RerankIssue {
  enum class Kind { parse, gateway, clamped };
  Kind kind = Kind::parse;
  std::string subject;  // doc id, or "first|second" for a pair
  std::string message;

  friend bool operator==(const RerankIssue&, const RerankIssue&) = default;
};

struct ParsedScore {
  double score = 0.0;
  std::optional<std::string> explanation;
  bool clamped = false;
};

struct ParsedVerdict {
  int verdict = 0;
  std::optional<std::string> explanation;
};

// JSON {"score", "explanation"} first; otherwise the first number in
// [-1, 1] found in the text. JSON scores outside the range are clamped.
std::optional<ParsedScore> parse_score_reply(std::string_view reply);
// JSON {"verdict", "explanation"} first; otherwise the first number in
// {-1, 0, 1}.
std::optional<ParsedVerdict> parse_verdict_reply(std::string_view reply);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

std::vector<CandidateScore> scs_embed(const Document& query, std::span<const Document> candidates,
                                      Gateway& gateway);

struct ScsOutcome {
  std::vector<CandidateScore> scores;  // scored candidates only
  std::vector<RerankIssue> issues;
};

ScsOutcome scs_llm(const Document& query, std::span<const Document> candidates,
                   const RerankMethod& method, Gateway& gateway,
                   const PromptTemplates& templates = PromptTemplates::defaults());

struct PcsOutcome {
  std::vector<PairVerdict> verdicts;  // n(n-1), ordered (i, j) for i != j
  std::vector<RerankIssue> issues;
};

PcsOutcome pcs_llm(const Document& query, std::span<const Document> candidates,
                   const RerankMethod& method, Gateway& gateway,
                   const PromptTemplates& templates = PromptTemplates::defaults());

// total[first] += v and total[second] -= v for every ordered verdict.
// Every candidate starts at 0.
std::map<std::string, long> aggregate_pair_verdicts(std::span<const PairVerdict> verdicts,
                                                    std::span<const std::string> candidate_ids);

Ranking ranking_from_scores(const std::string& query_id, std::span<const CandidateScore> scores);

struct RerankResult {
  std::string id;  // content hash, stable across runs
  std::string query_id;
  RerankMethod method;
  std::string query_text;
  std::map<std::string, std::string> candidate_texts;
  std::vector<CandidateScore> scores;
  Ranking ranking;
  std::vector<PairVerdict> verdicts;
  std::vector<RerankIssue> issues;
};

struct RerankOptions {
  std::size_t max_candidates = 30;
};

// Runs the method and builds the competition-ranked Ranking. Throws
// GatewayError when no candidate could be scored.
RerankResult rerank(const Document& query, std::span<const Document> candidates,
                    const RerankMethod& method, Gateway& gateway,
                    const PromptTemplates& templates = PromptTemplates::defaults(),
                    const RerankOptions& options = {});

std::string compute_result_id(const RerankResult& result);

nlohmann::json to_json(const RerankMethod& method);
RerankMethod method_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PairVerdict& verdict);
PairVerdict verdict_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RerankResult& result);
RerankResult rerank_result_from_json(const nlohmann::json& j);

void write_results(std::span<const RerankResult> results, const std::filesystem::path& path);
std::vector<RerankResult> read_results(const std::filesystem::path& path);

}  // namespace qbd
