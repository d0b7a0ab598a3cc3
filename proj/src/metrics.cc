#include "qbd/metrics.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "qbd/error.h"

namespace qbd {

using json = nlohmann::json;

namespace {

void require_aligned(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw DataError("rank lists differ in length (" + std::to_string(x.size()) + " vs " +
                    std::to_string(y.size()) + ")");
  }
  if (x.size() < 2) throw DataError("rank correlation needs at least 2 observations");
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::isnan(x[i]) || std::isnan(y[i])) throw DataError("NaN in rank list");
  }
}

std::uint64_t tied_pairs(std::uint64_t group) { return group * (group - 1) / 2; }

// Sum of g(g-1)/2 over runs of equal keys in an already sorted sequence.
template <typename Equal>
std::uint64_t count_tied_runs(const std::vector<std::size_t>& order, Equal equal) {
  std::uint64_t ties = 0;
  std::size_t run = 1;
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (equal(order[i - 1], order[i])) {
      ++run;
    } else {
      ties += tied_pairs(run);
      run = 1;
    }
  }
  return ties + tied_pairs(run);
}

// Stable merge sort of `order` by key, returning the number of inversions.
std::uint64_t sort_counting_swaps(std::vector<std::size_t>& order, std::span<const double> key) {
  std::vector<std::size_t> buffer(order.size());
  std::uint64_t swaps = 0;
  for (std::size_t width = 1; width < order.size(); width *= 2) {
    for (std::size_t lo = 0; lo < order.size(); lo += 2 * width) {
      const std::size_t mid = std::min(lo + width, order.size());
      const std::size_t hi = std::min(lo + 2 * width, order.size());
      std::size_t i = lo, j = mid, out = lo;
      while (i < mid && j < hi) {
        if (key[order[j]] < key[order[i]]) {
          swaps += mid - i;
          buffer[out++] = order[j++];
        } else {
          buffer[out++] = order[i++];
        }
      }
      while (i < mid) buffer[out++] = order[i++];
      while (j < hi) buffer[out++] = order[j++];
    }
    order.swap(buffer);
  }
  return swaps;
}

std::set<std::string> relevant_docs(const GradedList& truth, int threshold) {
  std::set<std::string> out;
  for (const auto& [doc, grade] : truth) {
    if (grade >= threshold) out.insert(doc);
  }
  return out;
}

}  // namespace

std::vector<std::string> Ranking::doc_ids() const {
  std::vector<std::string> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(e.doc_id);
  return out;
}

std::vector<int> assign_competition_ranks(std::span<const double> scores) {
  for (double s : scores) {
    if (std::isnan(s)) throw DataError("NaN score cannot be ranked");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<int> ranks(scores.size());
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    if (pos > 0 && scores[order[pos]] == scores[order[pos - 1]]) {
      ranks[order[pos]] = ranks[order[pos - 1]];
    } else {
      ranks[order[pos]] = static_cast<int>(pos) + 1;
    }
  }
  return ranks;
}

Ranking make_ranking(std::string query_id, std::vector<std::pair<std::string, double>> scored) {
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<double> scores;
  scores.reserve(scored.size());
  for (const auto& s : scored) scores.push_back(s.second);
  const auto ranks = assign_competition_ranks(scores);
  Ranking ranking{std::move(query_id), {}};
  ranking.entries.reserve(scored.size());
  for (std::size_t i = 0; i < scored.size(); ++i) {
    ranking.entries.push_back({std::move(scored[i].first), scored[i].second, ranks[i]});
  }
  return ranking;
}

std::vector<double> fractional_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t start = 0;
  while (start < order.size()) {
    std::size_t end = start + 1;
    while (end < order.size() && values[order[end]] == values[order[start]]) ++end;
    // Positions start..end-1 (0-based) share the mean of ranks start+1..end.
    const double average = (static_cast<double>(start + 1) + static_cast<double>(end)) / 2.0;
    for (std::size_t i = start; i < end; ++i) ranks[order[i]] = average;
    start = end;
  }
  return ranks;
}

TieCounts pair_counts(std::span<const double> ranks_x, std::span<const double> ranks_y) {
  require_aligned(ranks_x, ranks_y);
  const std::uint64_t n = ranks_x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (ranks_x[a] != ranks_x[b]) return ranks_x[a] < ranks_x[b];
    return ranks_y[a] < ranks_y[b];
  });
  const std::uint64_t tied_x = count_tied_runs(
      order, [&](std::size_t a, std::size_t b) { return ranks_x[a] == ranks_x[b]; });
  const std::uint64_t tied_xy = count_tied_runs(order, [&](std::size_t a, std::size_t b) {
    return ranks_x[a] == ranks_x[b] && ranks_y[a] == ranks_y[b];
  });
  // Within equal x the order is already ascending in y, so every inversion
  // left for the merge pass has x_i < x_j and y_i > y_j.
  const std::uint64_t discordant = sort_counting_swaps(order, ranks_y);
  const std::uint64_t tied_y = count_tied_runs(
      order, [&](std::size_t a, std::size_t b) { return ranks_y[a] == ranks_y[b]; });

  TieCounts counts;
  counts.discordant = discordant;
  counts.ties_both = tied_xy;
  counts.ties_first_only = tied_x - tied_xy;
  counts.ties_second_only = tied_y - tied_xy;
  counts.concordant = n * (n - 1) / 2 - discordant - tied_x - tied_y + tied_xy;
  return counts;
}

double kendall_tau_b(std::span<const double> ranks_x, std::span<const double> ranks_y) {
  const TieCounts t = pair_counts(ranks_x, ranks_y);
  const double c = static_cast<double>(t.concordant);
  const double d = static_cast<double>(t.discordant);
  const double denominator = (c + d + static_cast<double>(t.ties_first_only)) *
                             (c + d + static_cast<double>(t.ties_second_only));
  if (denominator <= 0.0) {
    throw UndefinedMetricError("tau_b undefined: every pair is tied in one of the rankings");
  }
  return std::clamp((c - d) / std::sqrt(denominator), -1.0, 1.0);
}

double spearman_rho(std::span<const double> scores_x, std::span<const double> scores_y) {
  require_aligned(scores_x, scores_y);
  const auto rx = fractional_ranks(scores_x);
  const auto ry = fractional_ranks(scores_y);
  const double n = static_cast<double>(rx.size());
  const double mean_x = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double mean_y = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    const double dx = rx[i] - mean_x;
    const double dy = ry[i] - mean_y;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw UndefinedMetricError("spearman rho undefined: zero rank variance");
  }
  return std::clamp(sxy / (std::sqrt(sxx) * std::sqrt(syy)), -1.0, 1.0);
}

double precision_at_k(std::span<const std::string> ranked_doc_ids,
                      const std::set<std::string>& relevant, int k) {
  if (k < 1) throw DataError("precision@k needs k >= 1");
  const std::size_t cutoff = std::min<std::size_t>(k, ranked_doc_ids.size());
  if (cutoff == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < cutoff; ++i) hits += relevant.contains(ranked_doc_ids[i]);
  return static_cast<double>(hits) / static_cast<double>(cutoff);
}

double average_precision(std::span<const std::string> ranked_doc_ids,
                         const std::set<std::string>& relevant) {
  if (relevant.empty()) throw UndefinedMetricError("average precision undefined: no relevant docs");
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ranked_doc_ids.size(); ++i) {
    if (relevant.contains(ranked_doc_ids[i])) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
  }
  return sum / static_cast<double>(relevant.size());
}

double mean_average_precision(std::span<const double> average_precisions) {
  if (average_precisions.empty()) throw UndefinedMetricError("MAP over an empty query set");
  return std::accumulate(average_precisions.begin(), average_precisions.end(), 0.0) /
         static_cast<double>(average_precisions.size());
}

double mean_reciprocal_rank(std::span<const std::optional<int>> first_relevant_ranks) {
  if (first_relevant_ranks.empty()) throw UndefinedMetricError("MRR over an empty query set");
  double sum = 0.0;
  for (const auto& rank : first_relevant_ranks) {
    if (rank) {
      if (*rank < 1) throw DataError("reciprocal rank needs rank >= 1");
      sum += 1.0 / static_cast<double>(*rank);
    }
  }
  return sum / static_cast<double>(first_relevant_ranks.size());
}

std::optional<int> first_relevant_rank(std::span<const std::string> ranked_doc_ids,
                                       const std::set<std::string>& relevant) {
  for (std::size_t i = 0; i < ranked_doc_ids.size(); ++i) {
    if (relevant.contains(ranked_doc_ids[i])) return static_cast<int>(i) + 1;
  }
  return std::nullopt;
}

Ranking truth_ranking(const std::string& query_id, const GradedList& truth) {
  std::vector<std::pair<std::string, double>> scored;
  scored.reserve(truth.size());
  for (const auto& [doc, grade] : truth) scored.emplace_back(doc, static_cast<double>(grade));
  return make_ranking(query_id, std::move(scored));
}

QueryMetrics measure_query(const Ranking& predicted, const GradedList& truth,
                           int relevance_threshold, const std::vector<int>& cutoffs) {
  std::map<std::string, int> truth_rank;
  const Ranking ideal = truth_ranking(predicted.query_id, truth);
  for (const auto& e : ideal.entries) truth_rank[e.doc_id] = e.rank;
  if (truth_rank.size() != truth.size()) {
    throw DataError("query " + predicted.query_id + ": duplicate doc in ground truth");
  }
  if (predicted.entries.size() != truth_rank.size()) {
    throw DataError("query " + predicted.query_id + ": predicted and truth doc sets differ");
  }
  std::vector<double> x, y;
  std::set<std::string> seen;
  for (const auto& e : predicted.entries) {
    auto it = truth_rank.find(e.doc_id);
    if (it == truth_rank.end() || !seen.insert(e.doc_id).second) {
      throw DataError("query " + predicted.query_id + ": predicted and truth doc sets differ at '" +
                      e.doc_id + "'");
    }
    x.push_back(e.rank);
    y.push_back(it->second);
  }

  QueryMetrics m;
  if (x.size() >= 2) {
    try {
      m.tau_b = kendall_tau_b(x, y);
    } catch (const UndefinedMetricError&) {
    }
    try {
      m.spearman_rho = spearman_rho(x, y);
    } catch (const UndefinedMetricError&) {
    }
  }
  const auto relevant = relevant_docs(truth, relevance_threshold);
  const auto ids = predicted.doc_ids();
  if (!relevant.empty()) m.average_precision = average_precision(ids, relevant);
  if (auto first = first_relevant_rank(ids, relevant)) m.reciprocal_rank = 1.0 / *first;
  for (int k : cutoffs) m.precision_at_k[k] = precision_at_k(ids, relevant, k);
  return m;
}

MetricReport evaluate_ranking(const Ranking& predicted, const GradedList& truth,
                              int relevance_threshold, const std::vector<int>& cutoffs) {
  const QueryMetrics m = measure_query(predicted, truth, relevance_threshold, cutoffs);
  if (!m.tau_b) throw UndefinedMetricError("query " + predicted.query_id + ": tau_b undefined");
  if (!m.spearman_rho) {
    throw UndefinedMetricError("query " + predicted.query_id + ": spearman rho undefined");
  }
  if (!m.average_precision) {
    throw UndefinedMetricError("query " + predicted.query_id + ": no relevant documents");
  }
  return {*m.tau_b, *m.spearman_rho, *m.average_precision, m.reciprocal_rank, m.precision_at_k};
}

EvaluationSummary summarize(std::span<const QueryMetrics> per_query) {
  if (per_query.empty()) throw UndefinedMetricError("evaluation over an empty query set");
  EvaluationSummary s;
  s.queries = per_query.size();
  double tau = 0.0, rho = 0.0, ap = 0.0, rr = 0.0;
  std::size_t n_tau = 0, n_rho = 0, n_ap = 0;
  for (const auto& m : per_query) {
    if (m.tau_b) tau += *m.tau_b, ++n_tau;
    if (m.spearman_rho) rho += *m.spearman_rho, ++n_rho;
    if (m.average_precision) ap += *m.average_precision, ++n_ap;
    rr += m.reciprocal_rank;
    for (const auto& [k, p] : m.precision_at_k) s.mean.precision_at_k[k] += p;
  }
  const double n = static_cast<double>(per_query.size());
  s.mean.tau_b = n_tau ? tau / static_cast<double>(n_tau) : 0.0;
  s.mean.spearman_rho = n_rho ? rho / static_cast<double>(n_rho) : 0.0;
  s.mean.map = n_ap ? ap / static_cast<double>(n_ap) : 0.0;
  s.mean.mrr = rr / n;
  for (auto& [k, p] : s.mean.precision_at_k) p /= n;
  s.undefined_tau_b = s.queries - n_tau;
  s.undefined_spearman = s.queries - n_rho;
  s.undefined_average_precision = s.queries - n_ap;
  return s;
}

json to_json(const MetricReport& report) {
  json j = {{"tau_b", report.tau_b},
            {"spearman_rho", report.spearman_rho},
            {"map", report.map},
            {"mrr", report.mrr}};
  for (const auto& [k, p] : report.precision_at_k) j["p@" + std::to_string(k)] = p;
  return j;
}

json to_json(const EvaluationSummary& summary) {
  json j = to_json(summary.mean);
  j["queries"] = summary.queries;
  j["undefined_tau_b"] = summary.undefined_tau_b;
  j["undefined_spearman"] = summary.undefined_spearman;
  j["undefined_average_precision"] = summary.undefined_average_precision;
  if (summary.undefined_tau_b == summary.queries) j["tau_b"] = nullptr;
  if (summary.undefined_spearman == summary.queries) j["spearman_rho"] = nullptr;
  if (summary.undefined_average_precision == summary.queries) j["map"] = nullptr;
  return j;
}

json to_json(const Ranking& ranking) {
  json entries = json::array();
  for (const auto& e : ranking.entries) {
    entries.push_back({{"doc_id", e.doc_id}, {"score", e.score}, {"rank", e.rank}});
  }
  return {{"query_id", ranking.query_id}, {"entries", entries}};
}

Ranking ranking_from_json(const json& j) {
  Ranking r;
  r.query_id = j.at("query_id").get<std::string>();
  for (const auto& e : j.at("entries")) {
    r.entries.push_back(
        {e.at("doc_id").get<std::string>(), e.at("score").get<double>(), e.at("rank").get<int>()});
  }
  return r;
}

}  // namespace qbd
