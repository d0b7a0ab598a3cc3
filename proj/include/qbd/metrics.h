#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace qbd {

struct RankedEntry {
  std::string doc_id;
  double score = 0.0;
  int rank = 1;

  friend bool operator==(const RankedEntry&, const RankedEntry&) = default;
};

// Candidates in descending score order with competition ranks (1, 1, 3, ...).
struct Ranking {
  std::string query_id;
  std::vector<RankedEntry> entries;

  std::vector<std::string> doc_ids() const;
  friend bool operator==(const Ranking&, const Ranking&) = default;
};

struct TieCounts {
  std::uint64_t concordant = 0;
  std::uint64_t discordant = 0;
  std::uint64_t ties_first_only = 0;
  std::uint64_t ties_second_only = 0;
  std::uint64_t ties_both = 0;

  std::uint64_t total() const {
    return concordant + discordant + ties_first_only + ties_second_only + ties_both;
  }
  friend bool operator==(const TieCounts&, const TieCounts&) = default;
};

struct MetricReport {
  double tau_b = 0.0;
  double spearman_rho = 0.0;
  double map = 0.0;
  double mrr = 0.0;
  std::map<int, double> precision_at_k;
};

inline const std::vector<int> kDefaultPrecisionCutoffs = {1, 3, 5, 10};

// Rank of each input position under descending score. Ties share the
// smallest rank and the next distinct score skips the tied count.
std::vector<int> assign_competition_ranks(std::span<const double> scores);

// Builds a Ranking: sort by score descending, ties broken by doc_id
// ascending, then competition ranks.
Ranking make_ranking(std::string query_id,
                     std::vector<std::pair<std::string, double>> scored);

// Average (fractional) ranks in ascending value order, 1-based.
std::vector<double> fractional_ranks(std::span<const double> values);

// Classification of all n(n-1)/2 index pairs of two aligned rank vectors.
// O(n log n) via sorting and merge-inversion counting.
TieCounts pair_counts(std::span<const double> ranks_x, std::span<const double> ranks_y);

double kendall_tau_b(std::span<const double> ranks_x, std::span<const double> ranks_y);
double spearman_rho(std::span<const double> scores_x, std::span<const double> scores_y);

double precision_at_k(std::span<const std::string> ranked_doc_ids,
                      const std::set<std::string>& relevant, int k);
double average_precision(std::span<const std::string> ranked_doc_ids,
                         const std::set<std::string>& relevant);
double mean_average_precision(std::span<const double> average_precisions);
// Per query: 1-based position of the first relevant document, or nullopt
// when none was retrieved (contributes 0).
double mean_reciprocal_rank(std::span<const std::optional<int>> first_relevant_ranks);
std::optional<int> first_relevant_rank(std::span<const std::string> ranked_doc_ids,
                                       const std::set<std::string>& relevant);

// Ground truth for one query: (doc_id, grade).
using GradedList = std::vector<std::pair<std::string, int>>;

Ranking truth_ranking(const std::string& query_id, const GradedList& truth);

// Compares `predicted` with the graded truth over the same document set.
// Throws UndefinedMetricError if any metric is undefined for this query.
MetricReport evaluate_ranking(const Ranking& predicted, const GradedList& truth,
                              int relevance_threshold = 1,
                              const std::vector<int>& cutoffs = kDefaultPrecisionCutoffs);

// Per-query metrics where undefined values are empty instead of thrown.
struct QueryMetrics {
  std::optional<double> tau_b;
  std::optional<double> spearman_rho;
  std::optional<double> average_precision;
  double reciprocal_rank = 0.0;
  std::map<int, double> precision_at_k;
};

QueryMetrics measure_query(const Ranking& predicted, const GradedList& truth,
                           int relevance_threshold = 1,
                           const std::vector<int>& cutoffs = kDefaultPrecisionCutoffs);

// Macro-average over queries. Each correlation/AP mean only covers queries
// where it is defined; the skip counts say how many were left out.
struct EvaluationSummary {
  MetricReport mean;
  std::size_t queries = 0;
  std::size_t undefined_tau_b = 0;
  std::size_t undefined_spearman = 0;
  std::size_t undefined_average_precision = 0;
};

EvaluationSummary summarize(std::span<const QueryMetrics> per_query);

nlohmann::json to_json(const MetricReport& report);
nlohmann::json to_json(const EvaluationSummary& summary);
nlohmann::json to_json(const Ranking& ranking);
Ranking ranking_from_json(const nlohmann::json& j);

}  // namespace qbd
