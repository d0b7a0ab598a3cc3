#include "qbd/corpus.h"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "qbd/error.h"
#include "qbd/random.h"

namespace qbd {

using json = nlohmann::json;

namespace {

std::string where(std::string_view source, std::size_t line_no) {
  return std::string(source) + ":" + std::to_string(line_no);
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return in;
}

bool blank(const std::string& line) {
  return line.find_first_not_of(" \t\r\n") == std::string::npos;
}

}  // namespace

std::set<std::string> DatasetSplit::train_queries() const {
  std::set<std::string> out;
  for (const auto& pair : train_pairs) out.insert(pair.query_id);
  return out;
}

std::map<std::string, std::vector<PoolCandidate>> DatasetSplit::train_lists() const {
  std::map<std::string, std::vector<PoolCandidate>> out;
  for (const auto& pair : train_pairs) {
    out[pair.query_id].push_back({pair.doc_id, pair.grade});
  }
  return out;
}

DocumentMap parse_documents(std::istream& in, std::string_view source) {
  DocumentMap docs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (blank(line)) continue;
    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(where(source, line_no) + ": malformed JSON: " + e.what());
    }
    if (!record.is_object() || !record.contains("id") || !record["id"].is_string() ||
        !record.contains("text") || !record["text"].is_string()) {
      throw DataError(where(source, line_no) + ": expected object with string id and text");
    }
    Document doc;
    doc.id = record["id"].get<std::string>();
    doc.text = record["text"].get<std::string>();
    if (doc.id.empty()) throw DataError(where(source, line_no) + ": empty document id");
    if (auto it = record.find("metadata"); it != record.end() && !it->is_null()) {
      if (!it->is_object()) throw DataError(where(source, line_no) + ": metadata must be an object");
      for (const auto& [key, value] : it->items()) {
        doc.metadata[key] = value.is_string() ? value.get<std::string>() : value.dump();
      }
    }
    const std::string id = doc.id;
    if (!docs.emplace(id, std::move(doc)).second) {
      throw DataError(where(source, line_no) + ": duplicate document id '" + id + "'");
    }
  }
  return docs;
}

DocumentMap load_documents(const std::filesystem::path& path) {
  auto in = open_input(path);
  return parse_documents(in, path.string());
}

std::vector<GradedJudgment> parse_judgments(std::istream& in, std::string_view source) {
  std::vector<GradedJudgment> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (blank(line) || line.front() == '#') continue;
    std::istringstream fields(line);
    std::string query_id, ignored, doc_id, grade_text, extra;
    if (!(fields >> query_id >> ignored >> doc_id >> grade_text) || (fields >> extra)) {
      throw DataError(where(source, line_no) + ": expected 4 whitespace-separated columns");
    }
    int grade = 0;
    std::size_t consumed = 0;
    try {
      grade = std::stoi(grade_text, &consumed);
    } catch (const std::exception&) {
      consumed = 0;
    }
    if (consumed != grade_text.size() || consumed == 0) {
      throw DataError(where(source, line_no) + ": grade '" + grade_text + "' is not an integer");
    }
    if (grade < kMinGrade || grade > kMaxGrade) {
      throw DataError(where(source, line_no) + ": grade " + grade_text + " outside {0,1,2}");
    }
    out.push_back({query_id, doc_id, grade});
  }
  return out;
}

std::vector<GradedJudgment> load_judgments(const std::filesystem::path& path) {
  auto in = open_input(path);
  return parse_judgments(in, path.string());
}

void validate_judgments(const DocumentMap& documents,
                        const std::vector<GradedJudgment>& judgments) {
  for (std::size_t i = 0; i < judgments.size(); ++i) {
    const auto& j = judgments[i];
    if (!documents.contains(j.query_id)) {
      throw DataError("judgment " + std::to_string(i + 1) + " references unknown query '" +
                      j.query_id + "'");
    }
    if (!documents.contains(j.doc_id)) {
      throw DataError("judgment " + std::to_string(i + 1) + " references unknown document '" +
                      j.doc_id + "'");
    }
  }
}

Corpus load_corpus(const std::filesystem::path& documents_path,
                   const std::filesystem::path& judgments_path) {
  Corpus corpus{load_documents(documents_path), load_judgments(judgments_path)};
  validate_judgments(corpus.documents, corpus.judgments);
  return corpus;
}

std::vector<CandidatePool> build_pools(const std::vector<GradedJudgment>& judgments) {
  std::map<std::string, CandidatePool> pools;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& j : judgments) {
    if (!seen.emplace(j.query_id, j.doc_id).second) {
      throw DataError("duplicate judgment for (" + j.query_id + ", " + j.doc_id + ")");
    }
    auto& pool = pools[j.query_id];
    pool.query_id = j.query_id;
    pool.candidates.push_back({j.doc_id, j.grade});
  }
  std::vector<CandidatePool> out;
  out.reserve(pools.size());
  for (auto& [id, pool] : pools) out.push_back(std::move(pool));
  return out;
}

DatasetSplit split_dataset(const std::vector<CandidatePool>& pools, std::uint64_t seed,
                           const SplitOptions& options) {
  if (pools.empty()) throw DataError("split: no candidate pools");
  if (!(options.pure_test_fraction > 0.0 && options.pure_test_fraction < 1.0)) {
    throw DataError("split: pure_test_fraction must lie in (0, 1)");
  }
  if (options.per_grade_cap < 1) throw DataError("split: per_grade_cap must be >= 1");
  if (options.train_pair_budget < 2) throw DataError("split: train_pair_budget must be >= 2");

  // Pools are processed in query-id order so the draw sequence depends on
  // content only, not on the caller's ordering.
  std::vector<const CandidatePool*> ordered;
  for (const auto& pool : pools) ordered.push_back(&pool);
  std::sort(ordered.begin(), ordered.end(),
            [](const auto* a, const auto* b) { return a->query_id < b->query_id; });
  for (std::size_t i = 1; i < ordered.size(); ++i) {
    if (ordered[i]->query_id == ordered[i - 1]->query_id) {
      throw DataError("split: duplicate pool for query '" + ordered[i]->query_id + "'");
    }
  }

  Rng rng(seed);

  // (1) Up to per_grade_cap candidates per grade, uniformly without replacement.
  std::map<std::string, std::vector<PoolCandidate>> sampled;
  for (const auto* pool : ordered) {
    std::map<int, std::vector<PoolCandidate>, std::greater<>> by_grade;
    for (const auto& c : pool->candidates) by_grade[c.grade].push_back(c);
    auto& picked = sampled[pool->query_id];
    for (auto& [grade, group] : by_grade) {
      rng.shuffle(group);
      const auto take = std::min<std::size_t>(group.size(), options.per_grade_cap);
      picked.insert(picked.end(), group.begin(), group.begin() + take);
    }
  }

  // (2) Pure test queries.
  std::vector<std::string> query_ids;
  for (const auto& [id, _] : sampled) query_ids.push_back(id);
  rng.shuffle(query_ids);
  const auto n_pure = static_cast<std::size_t>(
      std::ceil(options.pure_test_fraction * static_cast<double>(query_ids.size()) - 1e-9));
  DatasetSplit split;
  split.seed = seed;
  split.options = options;
  split.pure_test_queries.insert(query_ids.begin(), query_ids.begin() + n_pure);

  // (3) Flatten the rest into (query, candidate) pairs and shuffle.
  std::vector<TrainPair> pairs;
  for (const auto& [id, candidates] : sampled) {
    if (split.pure_test_queries.contains(id)) continue;
    for (const auto& c : candidates) pairs.push_back({id, c.doc_id, c.grade});
  }
  rng.shuffle(pairs);

  // (4) Select the budget; (5) drop queries with a single selected candidate.
  const auto n_selected = std::min<std::size_t>(pairs.size(), options.train_pair_budget);
  std::map<std::string, int> per_query;
  for (std::size_t i = 0; i < n_selected; ++i) ++per_query[pairs[i].query_id];
  std::set<std::pair<std::string, std::string>> in_train;
  for (std::size_t i = 0; i < n_selected; ++i) {
    if (per_query[pairs[i].query_id] >= 2) {
      split.train_pairs.push_back(pairs[i]);
      in_train.emplace(pairs[i].query_id, pairs[i].doc_id);
    }
  }
  if (split.train_pairs.empty()) {
    throw DataError("split: not enough pairs to form any training query with >= 2 candidates");
  }

  // (6) Everything else sampled is test; (7) enforce document disjointness.
  std::set<std::string> train_docs;
  for (const auto& pair : split.train_pairs) train_docs.insert(pair.doc_id);
  for (const auto& [id, candidates] : sampled) {
    for (const auto& c : candidates) {
      if (in_train.contains({id, c.doc_id})) continue;
      if (train_docs.contains(c.doc_id)) {
        ++split.removed_for_disjointness;
        continue;
      }
      split.test_lists[id].push_back(c);
    }
  }
  if (split.removed_for_disjointness > 0) {
    spdlog::info("split: removed {} test pairs whose document is also in training",
                 split.removed_for_disjointness);
  }
  return split;
}

void write_split(const DatasetSplit& split, std::ostream& out) {
  json header = {{"type", "split_header"},
                 {"version", 1},
                 {"seed", split.seed},
                 {"per_grade_cap", split.options.per_grade_cap},
                 {"pure_test_fraction", split.options.pure_test_fraction},
                 {"train_pair_budget", split.options.train_pair_budget},
                 {"removed_for_disjointness", split.removed_for_disjointness},
                 {"pure_test_queries", split.pure_test_queries}};
  out << header.dump() << '\n';
  for (const auto& pair : split.train_pairs) {
    out << json{{"type", "train"},
                {"query_id", pair.query_id},
                {"doc_id", pair.doc_id},
                {"grade", pair.grade}}
               .dump()
        << '\n';
  }
  for (const auto& [id, candidates] : split.test_lists) {
    json list = json::array();
    for (const auto& c : candidates) list.push_back({{"doc_id", c.doc_id}, {"grade", c.grade}});
    out << json{{"type", "test"}, {"query_id", id}, {"candidates", list}}.dump() << '\n';
  }
}

void save_split(const DatasetSplit& split, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  write_split(split, out);
}

DatasetSplit read_split(std::istream& in) {
  DatasetSplit split;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  try {
    while (std::getline(in, line)) {
      ++line_no;
      if (blank(line)) continue;
      const json record = json::parse(line);
      const auto type = record.at("type").get<std::string>();
      if (type == "split_header") {
        if (record.at("version").get<int>() != 1) throw DataError("unsupported split version");
        split.seed = record.at("seed").get<std::uint64_t>();
        split.options.per_grade_cap = record.at("per_grade_cap").get<int>();
        split.options.pure_test_fraction = record.at("pure_test_fraction").get<double>();
        split.options.train_pair_budget = record.at("train_pair_budget").get<int>();
        split.removed_for_disjointness = record.at("removed_for_disjointness").get<std::size_t>();
        split.pure_test_queries = record.at("pure_test_queries").get<std::set<std::string>>();
        have_header = true;
      } else if (!have_header) {
        throw DataError("missing split header");
      } else if (type == "train") {
        split.train_pairs.push_back({record.at("query_id").get<std::string>(),
                                     record.at("doc_id").get<std::string>(),
                                     record.at("grade").get<int>()});
      } else if (type == "test") {
        auto& list = split.test_lists[record.at("query_id").get<std::string>()];
        for (const auto& c : record.at("candidates")) {
          list.push_back({c.at("doc_id").get<std::string>(), c.at("grade").get<int>()});
        }
      } else {
        throw DataError("unknown record type '" + type + "'");
      }
    }
  } catch (const json::exception& e) {
    throw DataError("split line " + std::to_string(line_no) + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError("split line " + std::to_string(line_no) + ": " + e.what());
  }
  if (!have_header) throw DataError("split file has no header");
  return split;
}

DatasetSplit load_split(const std::filesystem::path& path) {
  auto in = open_input(path);
  return read_split(in);
}

}  // namespace qbd
