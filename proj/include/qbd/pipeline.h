#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "qbd/corpus.h"
#include "qbd/llm_gateway.h"
#include "qbd/rerank.h"
#include "qbd/tuner.h"

namespace qbd {

// Decides whether a query and its candidate list form a usable data point.
struct FilterSpec {
  std::size_t min_candidates = 2;
  std::size_t max_candidates = 30;
  bool require_grade_diversity = false;

  friend bool operator==(const FilterSpec&, const FilterSpec&) = default;
};

void validate(const FilterSpec& spec);
bool apply_filter(const std::vector<PoolCandidate>& candidates, const FilterSpec& spec);

enum class OracleStatus { unreviewed, accepted, corrected, rejected };

std::string to_string(OracleStatus status);
OracleStatus oracle_status_from(const std::string& name);

struct DatasetCandidate {
  std::string doc_id;
  double score = 0.0;
  int rank = 1;
  std::optional<int> grade;

  friend bool operator==(const DatasetCandidate&, const DatasetCandidate&) = default;
};

struct DatasetRecord {
  std::string query_id;
  std::string method;
  OracleStatus oracle_status = OracleStatus::unreviewed;
  std::vector<DatasetCandidate> candidates;  // ranked, at most t
  std::size_t pool_size = 0;                 // candidates the filter saw
  std::size_t distinct_grades = 0;
  std::string result_id;

  friend bool operator==(const DatasetRecord&, const DatasetRecord&) = default;
};

// Re-checks a record against the filter it was generated with.
bool record_satisfies(const DatasetRecord& record, const FilterSpec& spec);

struct GenerationFailure {
  std::string query_id;
  std::string message;

  friend bool operator==(const GenerationFailure&, const GenerationFailure&) = default;
};

struct DatasetManifest {
  int version = 1;
  std::uint64_t seed = 0;
  std::string method;
  long instructions_version = 0;
  std::string config_hash;
  FilterSpec filter;
  std::size_t t = 0;
  nlohmann::json ledger = nlohmann::json::object();
  std::vector<GenerationFailure> failures;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

struct GeneratedDataset {
  DatasetManifest manifest;
  std::vector<DatasetRecord> records;

  friend bool operator==(const GeneratedDataset&, const GeneratedDataset&) = default;
};

struct GenerateOptions {
  FilterSpec filter;
  std::size_t t = 30;
  std::uint64_t seed = 0;
  PromptTemplates templates = PromptTemplates::defaults();
};

// Hash over every generation-relevant setting: method and instructions,
// prompt templates, seed, filter, t and backend model names.
std::string generation_config_hash(const RerankMethod& method, const GenerateOptions& options,
                                   const GatewayConfig& gateway);

struct Generation {
  GeneratedDataset dataset;
  std::vector<RerankResult> results;  // one per record, same order
};

// Reranks every pool whose query passes the filter. Per-query failures are
// recorded in the manifest and do not stop the batch.
Generation generate(const DocumentMap& documents, const std::vector<CandidatePool>& pools,
                    const RerankMethod& method, Gateway& gateway, const GenerateOptions& options);

DatasetRecord record_from_result(const RerankResult& result, const std::vector<PoolCandidate>& pool,
                                 std::size_t t);

// JSONL: a manifest line, then one record per line. Rejected records are
// not written.
void write_dataset(const GeneratedDataset& dataset, std::ostream& out);
void export_dataset(const GeneratedDataset& dataset, const std::filesystem::path& path);
GeneratedDataset parse_dataset(std::string_view content);
GeneratedDataset import_dataset(const std::filesystem::path& path);

nlohmann::json to_json(const DatasetRecord& record);
DatasetRecord record_from_json(const nlohmann::json& j);

// Turns generated rankings into a tuning signal. Without an explicit rule,
// pairwise methods use positive totals and single-candidate methods use
// score >= scs_cutoff.
TrainingSignal signal_from_dataset(const GeneratedDataset& dataset,
                                   std::optional<RelevanceRule> rule = {},
                                   double scs_cutoff = 0.0);

}  // namespace qbd
