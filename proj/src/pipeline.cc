#include "qbd/pipeline.h"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "qbd/detail/parallel.h"
#include "qbd/error.h"
#include "qbd/hash.h"

namespace qbd {

using json = nlohmann::json;

namespace {

constexpr char kDatasetFormat[] = "qbd-generated-dataset";
constexpr int kDatasetVersion = 1;

std::size_t distinct_grades(const std::vector<PoolCandidate>& candidates) {
  std::set<int> grades;
  for (const auto& c : candidates) grades.insert(c.grade);
  return grades.size();
}

json to_json(const FilterSpec& f) {
  return {{"min_candidates", f.min_candidates},
          {"max_candidates", f.max_candidates},
          {"require_grade_diversity", f.require_grade_diversity}};
}

FilterSpec filter_from_json(const json& j) {
  return {j.at("min_candidates").get<std::size_t>(), j.at("max_candidates").get<std::size_t>(),
          j.at("require_grade_diversity").get<bool>()};
}

json to_json(const DatasetManifest& m, std::size_t record_count) {
  json failures = json::array();
  for (const auto& f : m.failures) failures.push_back({{"query_id", f.query_id}, {"message", f.message}});
  return {{"format", kDatasetFormat},
          {"version", m.version},
          {"seed", m.seed},
          {"method", m.method},
          {"instructions_version", m.instructions_version},
          {"config_hash", m.config_hash},
          {"filter", to_json(m.filter)},
          {"t", m.t},
          {"ledger", m.ledger},
          {"failures", failures},
          {"record_count", record_count}};
}

}  // namespace

void validate(const FilterSpec& spec) {
  if (spec.min_candidates < 1 || spec.min_candidates > spec.max_candidates) {
    throw DataError("filter: need 1 <= min_candidates <= max_candidates");
  }
}

bool apply_filter(const std::vector<PoolCandidate>& candidates, const FilterSpec& spec) {
  if (candidates.size() < spec.min_candidates || candidates.size() > spec.max_candidates) return false;
  return !spec.require_grade_diversity || distinct_grades(candidates) >= 2;
}

bool record_satisfies(const DatasetRecord& record, const FilterSpec& spec) {
  if (record.pool_size < spec.min_candidates || record.pool_size > spec.max_candidates) return false;
  return !spec.require_grade_diversity || record.distinct_grades >= 2;
}

std::string to_string(OracleStatus status) {
  switch (status) {
    case OracleStatus::unreviewed:
      return "unreviewed";
    case OracleStatus::accepted:
      return "accepted";
    case OracleStatus::corrected:
      return "corrected";
    case OracleStatus::rejected:
      return "rejected";
  }
  return "unreviewed";
}

OracleStatus oracle_status_from(const std::string& name) {
  if (name == "unreviewed") return OracleStatus::unreviewed;
  if (name == "accepted") return OracleStatus::accepted;
  if (name == "corrected") return OracleStatus::corrected;
  if (name == "rejected") return OracleStatus::rejected;
  throw DataError("unknown oracle status '" + name + "'");
}

std::string generation_config_hash(const RerankMethod& method, const GenerateOptions& options,
                                   const GatewayConfig& gateway) {
  const json settings = {{"method", to_json(method)},
                         {"single_template", options.templates.single},
                         {"pairwise_template", options.templates.pairwise},
                         {"seed", options.seed},
                         {"filter", to_json(options.filter)},
                         {"t", options.t},
                         {"model", gateway.model},
                         {"embedding_model", gateway.embedding_model},
                         {"temperature", gateway.temperature}};
  return sha256_hex(settings.dump());
}

DatasetRecord record_from_result(const RerankResult& result, const std::vector<PoolCandidate>& pool,
                                 std::size_t t) {
  std::map<std::string, int> grades;
  for (const auto& c : pool) grades[c.doc_id] = c.grade;
  DatasetRecord record;
  record.query_id = result.query_id;
  record.method = result.method.name();
  record.pool_size = pool.size();
  record.distinct_grades = distinct_grades(pool);
  record.result_id = result.id;
  const auto m = std::min(t, result.ranking.entries.size());
  for (std::size_t i = 0; i < m; ++i) {
    const auto& e = result.ranking.entries[i];
    DatasetCandidate c{e.doc_id, e.score, e.rank, std::nullopt};
    if (auto it = grades.find(e.doc_id); it != grades.end()) c.grade = it->second;
    record.candidates.push_back(std::move(c));
  }
  return record;
}

Generation generate(const DocumentMap& documents, const std::vector<CandidatePool>& pools,
                    const RerankMethod& method, Gateway& gateway, const GenerateOptions& options) {
  if (options.t < 1) throw DataError("generate: t must be >= 1");
  validate(options.filter);
  validate(method);

  std::vector<const CandidatePool*> selected;
  for (const auto& pool : pools) {
    if (!documents.contains(pool.query_id)) {
      spdlog::warn("generate: query {} has no document text, skipped", pool.query_id);
      continue;
    }
    if (apply_filter(pool.candidates, options.filter)) selected.push_back(&pool);
  }
  if (selected.empty()) throw DataError("generate: no query passes the filter");
  std::sort(selected.begin(), selected.end(),
            [](const auto* a, const auto* b) { return a->query_id < b->query_id; });

  const RerankOptions rerank_options{options.filter.max_candidates};
  std::vector<std::optional<RerankResult>> results(selected.size());
  std::vector<std::optional<std::string>> errors(selected.size());
  detail::parallel_for(selected.size(), gateway.parallelism(), [&](std::size_t i) {
    const auto& pool = *selected[i];
    try {
      std::vector<Document> candidates;
      for (const auto& c : pool.candidates) {
        auto it = documents.find(c.doc_id);
        if (it == documents.end()) throw DataError("candidate '" + c.doc_id + "' has no document text");
        candidates.push_back(it->second);
      }
      results[i] = rerank(documents.at(pool.query_id), candidates, method, gateway,
                          options.templates, rerank_options);
    } catch (const Error& e) {
      errors[i] = e.what();
    }
  });

  Generation out;
  auto& manifest = out.dataset.manifest;
  manifest.seed = options.seed;
  manifest.method = method.name();
  manifest.instructions_version = method.instructions_version;
  manifest.config_hash = generation_config_hash(method, options, gateway.config());
  manifest.filter = options.filter;
  manifest.t = options.t;
  for (std::size_t i = 0; i < selected.size(); ++i) {
    if (errors[i]) {
      spdlog::warn("generate: query {} failed: {}", selected[i]->query_id, *errors[i]);
      manifest.failures.push_back({selected[i]->query_id, *errors[i]});
      continue;
    }
    out.dataset.records.push_back(record_from_result(*results[i], selected[i]->candidates, options.t));
    out.results.push_back(std::move(*results[i]));
  }
  manifest.ledger = to_json(gateway.ledger());
  return out;
}

json to_json(const DatasetRecord& r) {
  json candidates = json::array();
  for (const auto& c : r.candidates) {
    json e = {{"doc_id", c.doc_id}, {"score", c.score}, {"rank", c.rank}};
    if (c.grade) e["grade"] = *c.grade;
    candidates.push_back(std::move(e));
  }
  return {{"query_id", r.query_id},
          {"method", r.method},
          {"oracle_status", to_string(r.oracle_status)},
          {"pool_size", r.pool_size},
          {"distinct_grades", r.distinct_grades},
          {"result_id", r.result_id},
          {"candidates", candidates}};
}

DatasetRecord record_from_json(const json& j) {
  DatasetRecord r;
  r.query_id = j.at("query_id").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.oracle_status = oracle_status_from(j.at("oracle_status").get<std::string>());
  r.pool_size = j.at("pool_size").get<std::size_t>();
  r.distinct_grades = j.at("distinct_grades").get<std::size_t>();
  r.result_id = j.at("result_id").get<std::string>();
  for (const auto& c : j.at("candidates")) {
    DatasetCandidate candidate{c.at("doc_id").get<std::string>(), c.at("score").get<double>(),
                               c.at("rank").get<int>(), std::nullopt};
    if (c.contains("grade")) candidate.grade = c["grade"].get<int>();
    r.candidates.push_back(std::move(candidate));
  }
  return r;
}

void write_dataset(const GeneratedDataset& dataset, std::ostream& out) {
  std::vector<const DatasetRecord*> kept;
  for (const auto& r : dataset.records) {
    if (r.oracle_status != OracleStatus::rejected) kept.push_back(&r);
  }
  out << to_json(dataset.manifest, kept.size()).dump() << '\n';
  for (const auto* r : kept) out << to_json(*r).dump() << '\n';
}

void export_dataset(const GeneratedDataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  write_dataset(dataset, out);
  if (!out) throw DataError("write failed for " + path.string());
}

GeneratedDataset parse_dataset(std::string_view content) {
  GeneratedDataset dataset;
  std::size_t offset = 0;
  std::size_t expected_records = 0;
  bool have_manifest = false;
  std::size_t record_index = 0;
  while (offset < content.size()) {
    const auto end = content.find('\n', offset);
    if (end == std::string_view::npos) {
      throw DataError("truncated dataset: unterminated line at byte offset " + std::to_string(offset));
    }
    const std::string_view line = content.substr(offset, end - offset);
    if (!have_manifest) {
      json m;
      try {
        m = json::parse(line);
        if (m.at("format") != kDatasetFormat) throw DataError("not a generated dataset file");
      } catch (const json::exception& e) {
        throw DataError(std::string("malformed dataset manifest at byte offset 0: ") + e.what());
      }
      const int version = m.value("version", 0);
      if (version != kDatasetVersion) {
        throw DataError("dataset version mismatch: file has " + std::to_string(version) +
                        ", expected " + std::to_string(kDatasetVersion));
      }
      try {
        auto& manifest = dataset.manifest;
        manifest.version = version;
        manifest.seed = m.at("seed").get<std::uint64_t>();
        manifest.method = m.at("method").get<std::string>();
        manifest.instructions_version = m.at("instructions_version").get<long>();
        manifest.config_hash = m.at("config_hash").get<std::string>();
        manifest.filter = filter_from_json(m.at("filter"));
        manifest.t = m.at("t").get<std::size_t>();
        manifest.ledger = m.at("ledger");
        for (const auto& f : m.at("failures")) {
          manifest.failures.push_back({f.at("query_id").get<std::string>(), f.at("message").get<std::string>()});
        }
        expected_records = m.at("record_count").get<std::size_t>();
      } catch (const json::exception& e) {
        throw DataError(std::string("schema violation in manifest at byte offset 0: ") + e.what());
      }
      have_manifest = true;
    } else {
      try {
        dataset.records.push_back(record_from_json(json::parse(line)));
      } catch (const std::exception& e) {
        throw DataError("schema violation in record " + std::to_string(record_index) +
                        " at byte offset " + std::to_string(offset) + ": " + e.what());
      }
      ++record_index;
    }
    offset = end + 1;
  }
  if (!have_manifest) throw DataError("dataset file has no manifest");
  if (dataset.records.size() != expected_records) {
    throw DataError("truncated dataset: " + std::to_string(dataset.records.size()) + " of " +
                    std::to_string(expected_records) + " records present at byte offset " +
                    std::to_string(content.size()));
  }
  return dataset;
}

GeneratedDataset import_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_dataset(buffer.str());
}

TrainingSignal signal_from_dataset(const GeneratedDataset& dataset, std::optional<RelevanceRule> rule,
                                   double scs_cutoff) {
  TrainingSignal signal;
  signal.provenance = dataset.manifest.method;
  if (rule) {
    signal.rule = *rule;
  } else if (dataset.manifest.method.starts_with("pcs")) {
    signal.rule.kind = RelevanceRule::Kind::positive_total;
    signal.rule.threshold = 0.0;
  } else {
    signal.rule.kind = RelevanceRule::Kind::score_cutoff;
    signal.rule.threshold = scs_cutoff;
  }
  for (const auto& record : dataset.records) {
    if (record.oracle_status == OracleStatus::rejected) continue;
    SignalList list{record.query_id, {}};
    for (const auto& c : record.candidates) list.entries.push_back({c.doc_id, c.score});
    signal.lists.push_back(std::move(list));
  }
  return signal;
}

}  // namespace qbd
