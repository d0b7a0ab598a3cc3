#include "qbd/rerank.h"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <regex>
#include <set>

#include "qbd/detail/parallel.h"
#include "qbd/error.h"
#include "qbd/hash.h"

namespace qbd {

using json = nlohmann::json;

namespace {

constexpr char kDefaultSingleTemplate[] =
    R"(You are assessing how well a candidate document matches a query document.
{{instructions}}
Query document:
{{query}}

Candidate document:
{{candidate}}

Rate how well the candidate matches the query, from -1 (clearly not a match) to 1 (clearly a match).
Reply with JSON only: {"score": <number between -1 and 1>, "explanation": "<one or two sentences>"}
)";

constexpr char kDefaultPairTemplate[] =
    R"(You are comparing two candidate documents against a query document.
{{instructions}}
Query document:
{{query}}

Candidate 1:
{{candidate_a}}

Candidate 2:
{{candidate_b}}

Answer 1 if candidate 1 is a better match than candidate 2, -1 if candidate 1 is a worse match than candidate 2, and 0 if both are equally good matches, equally bad, or you are uncertain.
Reply with JSON only: {"verdict": <-1, 0 or 1>, "explanation": "<one or two sentences>"}
)";

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

// The outermost {...} span of the reply, parsed as an object.
std::optional<json> embedded_object(std::string_view reply) {
  const auto open = reply.find('{');
  const auto close = reply.rfind('}');
  if (open == std::string_view::npos || close == std::string_view::npos || close < open) {
    return std::nullopt;
  }
  try {
    json j = json::parse(reply.substr(open, close - open + 1));
    if (j.is_object()) return j;
  } catch (const json::exception&) {
  }
  return std::nullopt;
}

std::optional<double> json_number(const json& value) {
  if (value.is_number()) return value.get<double>();
  if (value.is_string()) {
    try {
      std::size_t used = 0;
      const auto text = value.get<std::string>();
      const double v = std::stod(text, &used);
      if (used == text.size()) return v;
    } catch (const std::exception&) {
    }
  }
  return std::nullopt;
}

std::optional<std::string> json_explanation(const json& object) {
  auto it = object.find("explanation");
  if (it == object.end() || it->is_null()) return std::nullopt;
  return it->is_string() ? it->get<std::string>() : it->dump();
}

const std::regex& labelled_number() {
  static const std::regex re(R"((?:score|verdict)\s*[:=]?\s*([-+]?(?:\d+(?:\.\d*)?|\.\d+)))",
                             std::regex::icase);
  return re;
}

const std::regex& any_number() {
  static const std::regex re(R"([-+]?(?:\d+(?:\.\d*)?|\.\d+))");
  return re;
}

// First number matching `accept`, preferring ones labelled score/verdict.
template <typename Accept>
std::optional<double> fallback_number(const std::string& text, Accept accept) {
  for (const auto* re : {&labelled_number(), &any_number()}) {
    const int group = re == &labelled_number() ? 1 : 0;
    for (auto it = std::sregex_iterator(text.begin(), text.end(), *re); it != std::sregex_iterator();
         ++it) {
      const double v = std::stod((*it)[group].str());
      if (accept(v)) return v;
    }
  }
  return std::nullopt;
}

std::string issue_kind_name(RerankIssue::Kind kind) {
  switch (kind) {
    case RerankIssue::Kind::parse:
      return "parse";
    case RerankIssue::Kind::gateway:
      return "gateway";
    case RerankIssue::Kind::clamped:
      return "clamped";
  }
  return "parse";
}

RerankIssue::Kind issue_kind_from(const std::string& name) {
  if (name == "parse") return RerankIssue::Kind::parse;
  if (name == "gateway") return RerankIssue::Kind::gateway;
  if (name == "clamped") return RerankIssue::Kind::clamped;
  throw DataError("unknown issue kind '" + name + "'");
}

[[noreturn]] void rethrow_for_candidate(const std::string& doc_id) {
  try {
    throw;
  } catch (const GatewayError& e) {
    throw GatewayError("candidate " + doc_id + ": " + e.what());
  } catch (const Error& e) {
    throw DataError("candidate " + doc_id + ": " + e.what());
  }
}

void require_distinct(std::span<const Document> candidates) {
  std::set<std::string> seen;
  for (const auto& c : candidates) {
    if (!seen.insert(c.id).second) throw DataError("duplicate candidate '" + c.id + "'");
  }
}

}  // namespace

std::string RerankMethod::name() const {
  switch (kind) {
    case RerankKind::scs_emb:
      return "scs_emb";
    case RerankKind::scs_llm:
      return instructions ? "scs_instr" : "scs_llm";
    case RerankKind::pcs_llm:
      return instructions ? "pcs_instr" : "pcs_llm";
  }
  return "unknown";
}

RerankMethod parse_method(std::string_view name, std::optional<std::string> instructions,
                          long instructions_version) {
  RerankMethod method;
  if (name == "scs_emb") {
    method.kind = RerankKind::scs_emb;
  } else if (name == "scs_llm" || name == "scs_instr") {
    method.kind = RerankKind::scs_llm;
  } else if (name == "pcs_llm" || name == "pcs_instr") {
    method.kind = RerankKind::pcs_llm;
  } else {
    throw DataError("unknown rerank method '" + std::string(name) + "'");
  }
  const bool wants_instructions = name.ends_with("_instr");
  if (wants_instructions && !instructions) {
    throw DataError(std::string(name) + " requires instructions");
  }
  if (!wants_instructions && name != "scs_emb") instructions.reset();
  method.instructions = std::move(instructions);
  method.instructions_version = method.instructions ? instructions_version : 0;
  validate(method);
  return method;
}

void validate(const RerankMethod& method) {
  if (method.instructions && trim(*method.instructions).empty()) {
    throw DataError("instructions, when given, must be non-empty");
  }
  if (method.kind == RerankKind::scs_emb && method.instructions) {
    throw DataError("scs_emb does not take instructions");
  }
}

std::string render_template(std::string_view text, const std::map<std::string, std::string>& values) {
  std::string out;
  out.reserve(text.size());
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto open = text.find("{{", pos);
    if (open == std::string_view::npos) {
      out.append(text.substr(pos));
      break;
    }
    const auto close = text.find("}}", open + 2);
    if (close == std::string_view::npos) throw DataError("unterminated placeholder in template");
    out.append(text.substr(pos, open - pos));
    const std::string name = trim(text.substr(open + 2, close - open - 2));
    auto it = values.find(name);
    if (it == values.end()) throw DataError("unknown template placeholder '" + name + "'");
    out.append(it->second);
    pos = close + 2;
  }
  return out;
}

PromptTemplates PromptTemplates::defaults() { return {kDefaultSingleTemplate, kDefaultPairTemplate}; }

PromptTemplates PromptTemplates::load(const std::filesystem::path& dir) {
  PromptTemplates templates = defaults();
  auto read_into = [&](const char* file, std::string& target) {
    const auto path = dir / file;
    if (!std::filesystem::exists(path)) return;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read template " + path.string());
    target.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  };
  if (!std::filesystem::is_directory(dir)) throw DataError("template directory not found: " + dir.string());
  read_into("single.txt", templates.single);
  read_into("pairwise.txt", templates.pairwise);
  return templates;
}

std::string PromptTemplates::render_single(const std::string& query, const std::string& candidate,
                                           const std::optional<std::string>& instructions) const {
  return render_template(single, {{"query", query},
                                  {"candidate", candidate},
                                  {"instructions", instructions.value_or("")}});
}

std::string PromptTemplates::render_pair(const std::string& query, const std::string& candidate_a,
                                         const std::string& candidate_b,
                                         const std::optional<std::string>& instructions) const {
  return render_template(pairwise, {{"query", query},
                                    {"candidate_a", candidate_a},
                                    {"candidate_b", candidate_b},
                                    {"instructions", instructions.value_or("")}});
}

std::optional<ParsedScore> parse_score_reply(std::string_view reply) {
  if (auto object = embedded_object(reply); object && object->contains("score")) {
    auto value = json_number((*object)["score"]);
    if (!value || !std::isfinite(*value)) return std::nullopt;
    ParsedScore parsed{std::clamp(*value, -1.0, 1.0), json_explanation(*object), false};
    parsed.clamped = parsed.score != *value;
    return parsed;
  }
  const std::string text(reply);
  auto value = fallback_number(text, [](double v) { return v >= -1.0 && v <= 1.0; });
  if (!value) return std::nullopt;
  return ParsedScore{*value, trim(text), false};
}

std::optional<ParsedVerdict> parse_verdict_reply(std::string_view reply) {
  auto in_set = [](double v) { return v == -1.0 || v == 0.0 || v == 1.0; };
  if (auto object = embedded_object(reply); object && object->contains("verdict")) {
    auto value = json_number((*object)["verdict"]);
    if (!value || !in_set(*value)) return std::nullopt;
    return ParsedVerdict{static_cast<int>(*value), json_explanation(*object)};
  }
  const std::string text(reply);
  auto value = fallback_number(text, in_set);
  if (!value) return std::nullopt;
  return ParsedVerdict{static_cast<int>(*value), trim(text)};
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DataError("cosine: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw DataError("cosine: zero-norm vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

std::vector<CandidateScore> scs_embed(const Document& query, std::span<const Document> candidates,
                                      Gateway& gateway) {
  if (candidates.empty()) throw DataError("scs_emb: no candidates");
  std::vector<double> query_vector;
  try {
    query_vector = gateway.embed(query.text);
  } catch (const Error&) {
    rethrow_for_candidate(query.id + " (query)");
  }
  std::vector<CandidateScore> scores(candidates.size());
  detail::parallel_for(candidates.size(), gateway.parallelism(), [&](std::size_t i) {
    const auto& doc = candidates[i];
    try {
      scores[i] = {doc.id, cosine_similarity(query_vector, gateway.embed(doc.text)), std::nullopt};
    } catch (const Error&) {
      rethrow_for_candidate(doc.id);
    }
  });
  return scores;
}

ScsOutcome scs_llm(const Document& query, std::span<const Document> candidates,
                   const RerankMethod& method, Gateway& gateway, const PromptTemplates& templates) {
  if (candidates.empty()) throw DataError("scs_llm: no candidates");
  std::vector<std::optional<CandidateScore>> slots(candidates.size());
  std::vector<std::vector<RerankIssue>> issues(candidates.size());
  detail::parallel_for(candidates.size(), gateway.parallelism(), [&](std::size_t i) {
    const auto& doc = candidates[i];
    const auto prompt = templates.render_single(query.text, doc.text, method.instructions);
    std::string reply;
    try {
      reply = gateway.complete(prompt);
    } catch (const GatewayError& e) {
      issues[i].push_back({RerankIssue::Kind::gateway, doc.id, e.what()});
      return;
    }
    auto parsed = parse_score_reply(reply);
    if (!parsed) {
      issues[i].push_back({RerankIssue::Kind::parse, doc.id, "no score in reply: " + reply.substr(0, 120)});
      spdlog::warn("scs: unparseable reply for candidate {}", doc.id);
      return;
    }
    if (parsed->clamped) {
      issues[i].push_back({RerankIssue::Kind::clamped, doc.id, "score clamped into [-1, 1]"});
      spdlog::warn("scs: score for candidate {} clamped into [-1, 1]", doc.id);
    }
    slots[i] = CandidateScore{doc.id, parsed->score, parsed->explanation};
  });
  ScsOutcome out;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (slots[i]) out.scores.push_back(std::move(*slots[i]));
    for (auto& issue : issues[i]) out.issues.push_back(std::move(issue));
  }
  return out;
}

PcsOutcome pcs_llm(const Document& query, std::span<const Document> candidates,
                   const RerankMethod& method, Gateway& gateway, const PromptTemplates& templates) {
  const std::size_t n = candidates.size();
  if (n < 2) throw DataError("pcs_llm: needs at least 2 candidates");
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  pairs.reserve(n * (n - 1));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j) pairs.emplace_back(i, j);
    }
  }
  std::vector<PairVerdict> verdicts(pairs.size());
  std::vector<std::optional<RerankIssue>> issues(pairs.size());
  detail::parallel_for(pairs.size(), gateway.parallelism(), [&](std::size_t p) {
    const auto& first = candidates[pairs[p].first];
    const auto& second = candidates[pairs[p].second];
    PairVerdict& v = verdicts[p];
    v.doc_first = first.id;
    v.doc_second = second.id;
    const std::string subject = first.id + "|" + second.id;
    std::string reply;
    try {
      reply = gateway.complete(
          templates.render_pair(query.text, first.text, second.text, method.instructions));
    } catch (const GatewayError& e) {
      v.flagged = true;
      issues[p] = RerankIssue{RerankIssue::Kind::gateway, subject, e.what()};
      return;
    }
    if (auto parsed = parse_verdict_reply(reply)) {
      v.verdict = parsed->verdict;
      v.explanation = std::move(parsed->explanation);
    } else {
      v.flagged = true;
      v.explanation = trim(reply);
      issues[p] = RerankIssue{RerankIssue::Kind::parse, subject,
                              "no verdict in reply: " + reply.substr(0, 120)};
      spdlog::warn("pcs: unparseable reply for pair ({}, {}), using 0", first.id, second.id);
    }
  });
  PcsOutcome out;
  out.verdicts = std::move(verdicts);
  for (auto& issue : issues) {
    if (issue) out.issues.push_back(std::move(*issue));
  }
  return out;
}

std::map<std::string, long> aggregate_pair_verdicts(std::span<const PairVerdict> verdicts,
                                                    std::span<const std::string> candidate_ids) {
  std::map<std::string, long> totals;
  for (const auto& id : candidate_ids) totals.emplace(id, 0);
  for (const auto& v : verdicts) {
    auto first = totals.find(v.doc_first);
    auto second = totals.find(v.doc_second);
    if (first == totals.end() || second == totals.end()) {
      throw DataError("verdict (" + v.doc_first + ", " + v.doc_second +
                      ") references an unknown candidate");
    }
    if (v.verdict < -1 || v.verdict > 1) throw DataError("verdict outside {-1, 0, 1}");
    first->second += v.verdict;
    second->second -= v.verdict;
  }
  return totals;
}

Ranking ranking_from_scores(const std::string& query_id, std::span<const CandidateScore> scores) {
  std::vector<std::pair<std::string, double>> scored;
  scored.reserve(scores.size());
  for (const auto& s : scores) scored.emplace_back(s.doc_id, s.score);
  return make_ranking(query_id, std::move(scored));
}

RerankResult rerank(const Document& query, std::span<const Document> candidates,
                    const RerankMethod& method, Gateway& gateway, const PromptTemplates& templates,
                    const RerankOptions& options) {
  validate(method);
  if (candidates.empty()) throw DataError("rerank " + query.id + ": no candidates");
  if (candidates.size() > options.max_candidates) {
    throw DataError("rerank " + query.id + ": " + std::to_string(candidates.size()) +
                    " candidates exceed the limit of " + std::to_string(options.max_candidates));
  }
  require_distinct(candidates);

  RerankResult result;
  result.query_id = query.id;
  result.method = method;
  result.query_text = query.text;
  for (const auto& c : candidates) result.candidate_texts[c.id] = c.text;

  switch (method.kind) {
    case RerankKind::scs_emb:
      result.scores = scs_embed(query, candidates, gateway);
      break;
    case RerankKind::scs_llm: {
      auto outcome = scs_llm(query, candidates, method, gateway, templates);
      result.scores = std::move(outcome.scores);
      result.issues = std::move(outcome.issues);
      if (result.scores.empty()) {
        throw GatewayError("rerank " + query.id + ": no candidate could be scored");
      }
      break;
    }
    case RerankKind::pcs_llm: {
      std::vector<std::string> ids;
      for (const auto& c : candidates) ids.push_back(c.id);
      if (candidates.size() >= 2) {
        auto outcome = pcs_llm(query, candidates, method, gateway, templates);
        result.verdicts = std::move(outcome.verdicts);
        result.issues = std::move(outcome.issues);
        const auto failed = std::count_if(result.issues.begin(), result.issues.end(), [](const auto& i) {
          return i.kind == RerankIssue::Kind::gateway;
        });
        if (static_cast<std::size_t>(failed) == result.verdicts.size()) {
          throw GatewayError("rerank " + query.id + ": every pairwise call failed");
        }
      }
      const auto totals = aggregate_pair_verdicts(result.verdicts, ids);
      for (const auto& id : ids) {
        result.scores.push_back({id, static_cast<double>(totals.at(id)), std::nullopt});
      }
      break;
    }
  }
  result.ranking = ranking_from_scores(query.id, result.scores);
  result.id = compute_result_id(result);
  return result;
}

std::string compute_result_id(const RerankResult& result) {
  json j = to_json(result);
  j.erase("id");
  return sha256_hex(j.dump()).substr(0, 16);
}

json to_json(const RerankMethod& method) {
  json j = {{"name", method.name()}, {"instructions_version", method.instructions_version}};
  j["instructions"] = method.instructions ? json(*method.instructions) : json(nullptr);
  return j;
}

RerankMethod method_from_json(const json& j) {
  std::optional<std::string> instructions;
  if (j.contains("instructions") && !j["instructions"].is_null()) {
    instructions = j["instructions"].get<std::string>();
  }
  return parse_method(j.at("name").get<std::string>(), std::move(instructions),
                      j.value("instructions_version", 0L));
}

json to_json(const PairVerdict& v) {
  json j = {{"first", v.doc_first}, {"second", v.doc_second}, {"verdict", v.verdict}};
  j["explanation"] = v.explanation ? json(*v.explanation) : json(nullptr);
  if (v.flagged) j["flagged"] = true;
  return j;
}

PairVerdict verdict_from_json(const json& j) {
  PairVerdict v;
  v.doc_first = j.at("first").get<std::string>();
  v.doc_second = j.at("second").get<std::string>();
  v.verdict = j.at("verdict").get<int>();
  if (j.contains("explanation") && !j["explanation"].is_null()) {
    v.explanation = j["explanation"].get<std::string>();
  }
  v.flagged = j.value("flagged", false);
  return v;
}

json to_json(const RerankResult& r) {
  json scores = json::array();
  for (const auto& s : r.scores) {
    json e = {{"doc_id", s.doc_id}, {"score", s.score}};
    e["explanation"] = s.explanation ? json(*s.explanation) : json(nullptr);
    scores.push_back(std::move(e));
  }
  json verdicts = json::array();
  for (const auto& v : r.verdicts) verdicts.push_back(to_json(v));
  json issues = json::array();
  for (const auto& i : r.issues) {
    issues.push_back({{"kind", issue_kind_name(i.kind)}, {"subject", i.subject}, {"message", i.message}});
  }
  return {{"id", r.id},
          {"query_id", r.query_id},
          {"method", to_json(r.method)},
          {"query_text", r.query_text},
          {"candidate_texts", r.candidate_texts},
          {"scores", scores},
          {"ranking", to_json(r.ranking)},
          {"verdicts", verdicts},
          {"issues", issues}};
}

RerankResult rerank_result_from_json(const json& j) {
  RerankResult r;
  r.id = j.at("id").get<std::string>();
  r.query_id = j.at("query_id").get<std::string>();
  r.method = method_from_json(j.at("method"));
  r.query_text = j.at("query_text").get<std::string>();
  r.candidate_texts = j.at("candidate_texts").get<std::map<std::string, std::string>>();
  for (const auto& s : j.at("scores")) {
    CandidateScore c{s.at("doc_id").get<std::string>(), s.at("score").get<double>(), std::nullopt};
    if (s.contains("explanation") && !s["explanation"].is_null()) {
      c.explanation = s["explanation"].get<std::string>();
    }
    r.scores.push_back(std::move(c));
  }
  r.ranking = ranking_from_json(j.at("ranking"));
  for (const auto& v : j.at("verdicts")) r.verdicts.push_back(verdict_from_json(v));
  for (const auto& i : j.at("issues")) {
    r.issues.push_back({issue_kind_from(i.at("kind").get<std::string>()),
                        i.at("subject").get<std::string>(), i.at("message").get<std::string>()});
  }
  return r;
}

void write_results(std::span<const RerankResult> results, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& r : results) out << to_json(r).dump() << '\n';
}

std::vector<RerankResult> read_results(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<RerankResult> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(rerank_result_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace qbd
