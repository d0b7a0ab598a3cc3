#include "qbd/tuner.h"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "qbd/error.h"
#include "qbd/random.h"

namespace qbd {

using json = nlohmann::json;

namespace {

std::vector<Document> candidate_documents(const DocumentMap& documents, const std::string& query_id,
                                          const std::vector<std::string>& doc_ids) {
  std::vector<Document> out;
  out.reserve(doc_ids.size());
  for (const auto& id : doc_ids) {
    auto it = documents.find(id);
    if (it == documents.end()) {
      throw DataError("query " + query_id + ": candidate '" + id + "' has no document text");
    }
    out.push_back(it->second);
  }
  return out;
}

const Document& query_document(const DocumentMap& documents, const std::string& query_id) {
  auto it = documents.find(query_id);
  if (it == documents.end()) throw DataError("query '" + query_id + "' has no document text");
  return it->second;
}

}  // namespace

RelevanceRule RelevanceRule::parse(const std::string& text) {
  RelevanceRule rule;
  try {
    if (text.starts_with("grade>=")) {
      rule.kind = Kind::grade_threshold;
      rule.threshold = std::stod(text.substr(7));
    } else if (text == "positive") {
      rule.kind = Kind::positive_total;
      rule.threshold = 0.0;
    } else if (text.starts_with("cutoff:")) {
      rule.kind = Kind::score_cutoff;
      rule.threshold = std::stod(text.substr(7));
    } else if (text.starts_with("top:")) {
      rule.kind = Kind::top_k;
      rule.k = std::stoi(text.substr(4));
      if (rule.k < 1) throw DataError("top:k needs k >= 1");
    } else {
      throw DataError("unknown relevance rule '" + text + "'");
    }
  } catch (const std::logic_error&) {
    throw DataError("malformed relevance rule '" + text + "'");
  }
  return rule;
}

std::string RelevanceRule::describe() const {
  std::ostringstream out;
  switch (kind) {
    case Kind::grade_threshold:
      out << "grade>=" << threshold;
      break;
    case Kind::positive_total:
      out << "positive";
      break;
    case Kind::score_cutoff:
      out << "cutoff:" << threshold;
      break;
    case Kind::top_k:
      out << "top:" << k;
      break;
  }
  return out.str();
}

TrainingSignal signal_from_grades(const std::map<std::string, std::vector<PoolCandidate>>& lists,
                                  std::string provenance, int threshold) {
  TrainingSignal signal;
  signal.provenance = std::move(provenance);
  signal.rule.kind = RelevanceRule::Kind::grade_threshold;
  signal.rule.threshold = threshold;
  for (const auto& [query_id, candidates] : lists) {
    SignalList list{query_id, {}};
    for (const auto& c : candidates) list.entries.push_back({c.doc_id, static_cast<double>(c.grade)});
    signal.lists.push_back(std::move(list));
  }
  return signal;
}

RelevanceSets signal_to_relevance(const TrainingSignal& signal) {
  if (signal.lists.empty()) throw DataError("training signal is empty");
  RelevanceSets out;
  const auto& rule = signal.rule;
  for (const auto& list : signal.lists) {
    std::set<std::string> relevant;
    if (rule.kind == RelevanceRule::Kind::top_k) {
      std::vector<double> values;
      for (const auto& e : list.entries) values.push_back(e.value);
      std::sort(values.begin(), values.end(), std::greater<>());
      if (!values.empty()) {
        const double floor = values[std::min<std::size_t>(rule.k, values.size()) - 1];
        for (const auto& e : list.entries) {
          if (e.value >= floor) relevant.insert(e.doc_id);
        }
      }
    } else {
      for (const auto& e : list.entries) {
        const bool hit = rule.kind == RelevanceRule::Kind::positive_total ? e.value > 0.0
                                                                          : e.value >= rule.threshold;
        if (hit) relevant.insert(e.doc_id);
      }
    }
    if (relevant.empty()) {
      spdlog::warn("query {} has no relevant documents under rule {}; excluded", list.query_id,
                   rule.describe());
      out.excluded.push_back(list.query_id);
    } else {
      out.relevant[list.query_id] = std::move(relevant);
    }
  }
  return out;
}

void validate(const TuneConfig& config) {
  if (config.n_trials < 1) throw DataError("tune: n_trials must be >= 1");
  if (!(config.k1_range.first < config.k1_range.second) || config.k1_range.first <= 0.0) {
    throw DataError("tune: k1 range must be non-degenerate and positive");
  }
  if (!(config.b_range.first < config.b_range.second) || config.b_range.first < 0.0 ||
      config.b_range.second > 1.0) {
    throw DataError("tune: b range must be non-degenerate inside [0, 1]");
  }
  if (config.mode == TuneConfig::Mode::grid && (config.grid_k1_points < 2 || config.grid_b_points < 2)) {
    throw DataError("tune: grid needs at least 2 points per axis");
  }
}

std::vector<Bm25Params> trial_points(const TuneConfig& config) {
  validate(config);
  std::vector<Bm25Params> points{kDefaultBm25Params};
  if (config.mode == TuneConfig::Mode::grid) {
    const auto [k_lo, k_hi] = config.k1_range;
    const auto [b_lo, b_hi] = config.b_range;
    for (int i = 0; i < config.grid_k1_points; ++i) {
      for (int j = 0; j < config.grid_b_points; ++j) {
        points.push_back({k_lo + (k_hi - k_lo) * i / (config.grid_k1_points - 1),
                          b_lo + (b_hi - b_lo) * j / (config.grid_b_points - 1)});
      }
    }
    return points;
  }
  Rng rng(config.seed);
  for (int t = 1; t < config.n_trials; ++t) {
    const double k1 = rng.real(config.k1_range.first, config.k1_range.second);
    const double b = rng.real(config.b_range.first, config.b_range.second);
    points.push_back({k1, b});
  }
  return points;
}

TuneResult tune(const Bm25Index& index, const DocumentMap& documents, const TrainingSignal& signal,
                const TuneConfig& config) {
  const auto points = trial_points(config);
  const RelevanceSets relevance = signal_to_relevance(signal);

  struct Prepared {
    QueryPlan plan;
    const std::set<std::string>* relevant;
  };
  std::vector<Prepared> queries;
  TuneResult result;
  for (const auto& list : signal.lists) {
    auto rel = relevance.relevant.find(list.query_id);
    if (rel == relevance.relevant.end()) continue;
    std::vector<std::string> ids;
    for (const auto& e : list.entries) ids.push_back(e.doc_id);
    const auto candidates = candidate_documents(documents, list.query_id, ids);
    const auto& query = query_document(documents, list.query_id);
    queries.push_back({QueryPlan(index, list.query_id, query.text, candidates), &rel->second});
    result.unindexed_candidates += queries.back().plan.unindexed_count();
  }
  if (queries.empty()) throw DataError("tune: no evaluable queries in the signal");

  result.provenance = signal.provenance;
  result.rule = signal.rule.describe();
  result.queries_used = queries.size();
  result.excluded_queries = relevance.excluded;
  for (std::size_t t = 0; t < points.size(); ++t) {
    std::vector<double> aps;
    aps.reserve(queries.size());
    for (const auto& q : queries) {
      const auto ranking = q.plan.rank(points[t]);
      aps.push_back(average_precision(ranking.doc_ids(), *q.relevant));
    }
    const double objective = mean_average_precision(aps);
    result.history.push_back({static_cast<int>(t), points[t], objective});
    if (t == 0 || objective > result.best_objective) {
      result.best = points[t];
      result.best_objective = objective;
    }
  }
  return result;
}

TunedEvaluation evaluate_tuned(const Bm25Params& params, const Bm25Index& index,
                               const DocumentMap& documents,
                               const std::map<std::string, std::vector<PoolCandidate>>& test_lists,
                               int relevance_threshold, const std::vector<int>& cutoffs) {
  if (test_lists.empty()) throw DataError("evaluate: empty test set");
  std::vector<QueryMetrics> per_query;
  TunedEvaluation out;
  for (const auto& [query_id, candidates] : test_lists) {
    if (candidates.empty()) continue;
    std::vector<std::string> ids;
    GradedList truth;
    for (const auto& c : candidates) {
      ids.push_back(c.doc_id);
      truth.emplace_back(c.doc_id, c.grade);
    }
    const auto docs = candidate_documents(documents, query_id, ids);
    const auto ranked =
        rank_candidates(index, params, query_id, query_document(documents, query_id).text, docs);
    out.unindexed_candidates += ranked.unindexed_count;
    per_query.push_back(measure_query(ranked.ranking, truth, relevance_threshold, cutoffs));
  }
  if (per_query.empty()) throw DataError("evaluate: every test list is empty");
  out.summary = summarize(per_query);
  return out;
}

std::vector<const Document*> training_documents(const DatasetSplit& split, const DocumentMap& documents) {
  std::set<std::string> ids;
  for (const auto& pair : split.train_pairs) ids.insert(pair.doc_id);
  std::vector<const Document*> out;
  for (const auto& id : ids) {
    auto it = documents.find(id);
    if (it == documents.end()) throw DataError("training document '" + id + "' has no text");
    out.push_back(&it->second);
  }
  if (out.empty()) throw DataError("split has no training documents");
  return out;
}

json to_json(const TuneResult& r) {
  json history = json::array();
  for (const auto& t : r.history) {
    history.push_back({{"trial", t.index}, {"k1", t.params.k1}, {"b", t.params.b}, {"map", t.objective}});
  }
  return {{"best", {{"k1", r.best.k1}, {"b", r.best.b}}},
          {"best_map", r.best_objective},
          {"provenance", r.provenance},
          {"rule", r.rule},
          {"queries_used", r.queries_used},
          {"excluded_queries", r.excluded_queries},
          {"unindexed_candidates", r.unindexed_candidates},
          {"history", history}};
}

TuneResult tune_result_from_json(const json& j) {
  TuneResult r;
  try {
    r.best = {j.at("best").at("k1").get<double>(), j.at("best").at("b").get<double>()};
    r.best_objective = j.at("best_map").get<double>();
    r.provenance = j.value("provenance", "");
    r.rule = j.value("rule", "");
    r.queries_used = j.value("queries_used", std::size_t{0});
    r.excluded_queries = j.value("excluded_queries", std::vector<std::string>{});
    r.unindexed_candidates = j.value("unindexed_candidates", std::size_t{0});
    for (const auto& t : j.at("history")) {
      r.history.push_back({t.at("trial").get<int>(),
                           {t.at("k1").get<double>(), t.at("b").get<double>()},
                           t.at("map").get<double>()});
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed tune result: ") + e.what());
  }
  return r;
}

}  // namespace qbd
