#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "qbd/bm25.h"
#include "qbd/corpus.h"
#include "qbd/metrics.h"

namespace qbd {

// How a ranked training signal is binarized into relevant documents.
struct RelevanceRule {
  enum class Kind {
    grade_threshold,  // value >= threshold (ground-truth grades)
    positive_total,   // value > 0 (pairwise totals)
    score_cutoff,     // value >= threshold (single-candidate scores)
    top_k,            // the k highest values, ties included
  };
  Kind kind = Kind::grade_threshold;
  double threshold = 1.0;
  int k = 1;

  // "grade>=1", "positive", "cutoff:0.5", "top:3"
  static RelevanceRule parse(const std::string& text);
  std::string describe() const;
};

struct SignalEntry {
  std::string doc_id;
  double value = 0.0;
};

struct SignalList {
  std::string query_id;
  std::vector<SignalEntry> entries;
};

struct TrainingSignal {
  std::string provenance;  // ideal-train, ideal-test, or a method name
  RelevanceRule rule;
  std::vector<SignalList> lists;
};

TrainingSignal signal_from_grades(const std::map<std::string, std::vector<PoolCandidate>>& lists,
                                  std::string provenance, int threshold = 1);

struct RelevanceSets {
  std::map<std::string, std::set<std::string>> relevant;
  // Queries whose relevant set came out empty; their AP is undefined.
  std::vector<std::string> excluded;
};

RelevanceSets signal_to_relevance(const TrainingSignal& signal);

struct TuneConfig {
  enum class Mode { random, grid };

  int n_trials = 50;
  std::pair<double, double> k1_range{1.2, 2.0};
  std::pair<double, double> b_range{0.1, 1.0};
  std::uint64_t seed = 0;
  Mode mode = Mode::random;
  int grid_k1_points = 9;
  int grid_b_points = 10;
};

void validate(const TuneConfig& config);

// Trial parameters in order: the default point, then seeded uniform draws
// (random mode) or the inclusive lattice over both ranges (grid mode).
std::vector<Bm25Params> trial_points(const TuneConfig& config);

struct TrialRecord {
  int index = 0;
  Bm25Params params;
  double objective = 0.0;
};

struct TuneResult {
  Bm25Params best;
  double best_objective = 0.0;
  std::vector<TrialRecord> history;
  std::string provenance;
  std::string rule;
  std::size_t queries_used = 0;
  std::vector<std::string> excluded_queries;
  std::size_t unindexed_candidates = 0;
};

// Maximizes MAP of BM25 rankings of each signal query's candidates against
// the relevant sets derived from the signal. The earliest best trial wins.
TuneResult tune(const Bm25Index& index, const DocumentMap& documents,
                const TrainingSignal& signal, const TuneConfig& config = {});

struct TunedEvaluation {
  EvaluationSummary summary;
  std::size_t unindexed_candidates = 0;
};

TunedEvaluation evaluate_tuned(const Bm25Params& params, const Bm25Index& index,
                               const DocumentMap& documents,
                               const std::map<std::string, std::vector<PoolCandidate>>& test_lists,
                               int relevance_threshold = 1,
                               const std::vector<int>& cutoffs = kDefaultPrecisionCutoffs);

// Candidate documents of the training pairs, the set the index is built on.
std::vector<const Document*> training_documents(const DatasetSplit& split, const DocumentMap& documents);

nlohmann::json to_json(const TuneResult& result);
TuneResult tune_result_from_json(const nlohmann::json& j);

}  // namespace qbd
