// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <latch>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <spdlog/spdlog.h>

#include "qbd/bm25.h"
#include "qbd/corpus.h"
#include "qbd/error.h"
#include "qbd/metrics.h"
#include "qbd/pipeline.h"
#include "qbd/rerank.h"
#include "qbd/review_service.h"
#include "qbd/stub_fixtures.h"
#include "qbd/tuner.h"
#include "support.h"

namespace {

using namespace qbd;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Check {
 public:
  void require(bool ok, const std::string& what) {
    if (!ok && outcome_.pass) {
      outcome_.pass = false;
      outcome_.detail = what;
    }
  }
  Outcome& outcome() { return outcome_; }

 private:
  Outcome outcome_;
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(digits);
  out << v;
  return out.str();
}

std::string sci(double v) {
  std::ostringstream out;
  out.precision(2);
  out << std::scientific << v;
  return out.str();
}

// Every vector over {0..n-1} whose values form a contiguous block from 0:
// one representative per weak ordering of n items.
std::vector<std::vector<double>> weak_orderings(int n) {
  std::vector<std::vector<double>> out;
  std::vector<int> v(n, 0);
  while (true) {
    std::set<int> used(v.begin(), v.end());
    if (*used.rbegin() + 1 == static_cast<int>(used.size())) out.emplace_back(v.begin(), v.end());
    int i = 0;
    while (i < n && ++v[i] == n) v[i++] = 0;
    if (i == n) break;
  }
  return out;
}

bool constant(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; });
}

Outcome metric_oracle() {
  Check check;
  const auto start = Clock::now();
  double worst = 0.0;
  std::size_t pairs = 0, ap_cases = 0;
  for (int n = 1; n <= 6; ++n) {
    const auto orderings = weak_orderings(n);
    // Joint re-indexing leaves both statistics unchanged, so sorted x
    // patterns against every y ordering cover all (x, y) pairs.
    for (const auto& x : orderings) {
      if (!std::is_sorted(x.begin(), x.end())) continue;
      for (const auto& y : orderings) {
        if (n < 2) break;
        ++pairs;
        const bool undefined = constant(x) || constant(y);
        try {
          const double tau = kendall_tau_b(x, y);
          const double rho = spearman_rho(x, y);
          check.require(!undefined, "defined value for a constant list");
          worst = std::max({worst, std::abs(tau - testing::brute_tau_b(x, y)),
                            std::abs(rho - testing::brute_spearman(x, y))});
        } catch (const UndefinedMetricError&) {
          check.require(undefined, "undefined value for a non-constant pair");
        }
      }
    }
    // AP over every tied score pattern and relevance subset, with and
    // without one relevant document missing from the list.
    std::vector<std::string> ids;
    for (int i = 0; i < n; ++i) ids.push_back("d" + std::to_string(i));
    for (const auto& scores : orderings) {
      std::vector<std::pair<std::string, double>> scored;
      for (int i = 0; i < n; ++i) scored.emplace_back(ids[i], scores[i]);
      const auto ranked = make_ranking("q", scored).doc_ids();
      std::vector<int> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](int a, int b) {
        return scores[a] != scores[b] ? scores[a] > scores[b] : ids[a] < ids[b];
      });
      std::vector<std::string> expected_order;
      for (int i : order) expected_order.push_back(ids[i]);
      check.require(ranked == expected_order, "tie-broken order differs from oracle");
      for (int mask = 1; mask < (1 << n); ++mask) {
        for (int missing = 0; missing < 2; ++missing) {
          std::set<std::string> relevant;
          for (int i = 0; i < n; ++i) {
            if (mask >> i & 1) relevant.insert(ids[i]);
          }
          if (missing) relevant.insert("absent");
          ++ap_cases;
          worst = std::max(worst, std::abs(average_precision(ranked, relevant) -
                                           testing::brute_average_precision(expected_order, relevant)));
        }
      }
    }
  }
  const double elapsed = seconds_since(start);
  check.require(worst <= 1e-12, "max deviation " + sci(worst));
  check.require(elapsed < 10.0, "runtime " + fmt(elapsed, 2) + " s");
  auto& out = check.outcome();
  if (out.pass) {
    out.detail = std::to_string(pairs) + " tau/rho pairs, " + std::to_string(ap_cases) +
                 " AP cases, max |diff| " + sci(worst) + ", " + fmt(elapsed, 2) + " s";
  }
  return out;
}

Outcome constants() {
  Check check;
  check.require(kDefaultBm25Params.k1 == 1.5 && kDefaultBm25Params.b == 0.75, "BM25 defaults");
  const TuneConfig config;
  check.require(config.k1_range == std::pair{1.2, 2.0}, "k1 range");
  check.require(config.b_range == std::pair{0.1, 1.0}, "b range");
  check.require(config.n_trials == 50, "trial count");
  const auto points = trial_points(config);
  check.require(points.size() == 50 && points[0] == kDefaultBm25Params, "trial points");
  for (const auto& p : points) {
    check.require(p.k1 >= 1.2 && p.k1 <= 2.0 && p.b >= 0.1 && p.b <= 1.0, "trial outside the box");
  }
  const std::vector<double> tie = {0.9, 0.9, 0.5};
  check.require(assign_competition_ranks(tie) == std::vector<int>{1, 1, 3}, "competition ranks");
  const auto ranking = make_ranking("q", {{"a", 0.9}, {"b", 0.9}, {"c", 0.5}});
  check.require(ranking.entries[2].rank == 3, "ranking rank after tie");
  if (check.outcome().pass) check.outcome().detail = "k1=1.5 b=0.75, box [1.2,2.0]x[0.1,1.0], 50 trials, ranks [1,1,3]";
  return check.outcome();
}

Outcome pcs_aggregation() {
  Check check;
  const auto start = Clock::now();
  std::vector<PairVerdict> verdicts = {{"A", "B", 1, {}, false},  {"B", "A", -1, {}, false},
                                       {"A", "C", 1, {}, false},  {"C", "A", -1, {}, false},
                                       {"B", "C", 1, {}, false},  {"C", "B", -1, {}, false}};
  const std::vector<std::string> ids = {"A", "B", "C"};
  // Independent re-aggregation.
  std::map<std::string, long> oracle = {{"A", 0}, {"B", 0}, {"C", 0}};
  for (const auto& v : verdicts) {
    oracle[v.doc_first] += v.verdict;
    oracle[v.doc_second] -= v.verdict;
  }
  const std::map<std::string, long> hand = {{"A", 4}, {"B", 0}, {"C", -4}};
  check.require(oracle == hand, "oracle disagrees with hand totals");
  std::vector<int> perm(verdicts.size());
  std::iota(perm.begin(), perm.end(), 0);
  int permutations = 0;
  do {
    std::vector<PairVerdict> shuffled;
    for (int i : perm) shuffled.push_back(verdicts[i]);
    const auto totals = aggregate_pair_verdicts(shuffled, ids);
    check.require(totals == hand, "totals differ under permutation");
    std::vector<std::pair<std::string, double>> scored;
    for (const auto& [id, t] : totals) scored.emplace_back(id, static_cast<double>(t));
    check.require(make_ranking("q", scored).doc_ids() == ids, "ranking is not A,B,C");
    ++permutations;
  } while (std::next_permutation(perm.begin(), perm.end()));
  const double elapsed = seconds_since(start);
  check.require(elapsed < 1.0, "runtime " + fmt(elapsed, 3) + " s");
  if (check.outcome().pass) {
    check.outcome().detail = "totals (+4, 0, -4) over " + std::to_string(permutations) + " orderings, " +
                             fmt(elapsed, 3) + " s";
  }
  return check.outcome();
}

std::unique_ptr<Gateway> responder_gateway(StubBackend::Responder responder) {
  GatewayConfig config;
  config.model = "stub";
  config.max_retries = 0;
  auto stub = std::make_unique<StubBackend>();
  stub->set_responder(std::move(responder));
  return std::make_unique<Gateway>(config, std::move(stub));
}

// Okapi BM25 over whitespace tokens, written independently of the library.
struct ReferenceBm25 {
  std::map<std::string, std::vector<std::string>> docs;
  std::map<std::string, double> df;
  double avgdl = 0.0;

  explicit ReferenceBm25(const std::vector<const Document*>& corpus) {
    double total = 0;
    for (const auto* d : corpus) {
      std::istringstream in(d->text);
      std::vector<std::string> tokens;
      for (std::string w; in >> w;) tokens.push_back(w);
      total += static_cast<double>(tokens.size());
      for (const auto& w : std::set<std::string>(tokens.begin(), tokens.end())) df[w] += 1;
      docs[d->id] = std::move(tokens);
    }
    avgdl = total / static_cast<double>(docs.size());
  }

  double score(const std::string& query, const std::string& doc, double k1, double b) const {
    const auto& tokens = docs.at(doc);
    const double n = static_cast<double>(docs.size());
    std::istringstream in(query);
    double s = 0;
    for (std::string term; in >> term;) {
      const double f = df.contains(term) ? df.at(term) : 0.0;
      const double tf = static_cast<double>(std::count(tokens.begin(), tokens.end(), term));
      s += std::log(1 + (n - f + 0.5) / (f + 0.5)) * tf * (k1 + 1) /
           (tf + k1 * (1 - b + b * static_cast<double>(tokens.size()) / avgdl));
    }
    return s;
  }

  double map(const std::map<std::string, std::vector<std::string>>& lists,
             const std::map<std::string, std::set<std::string>>& relevant, const DocumentMap& documents,
             double k1, double b) const {
    double sum = 0;
    for (const auto& [q, ids] : lists) {
      std::vector<std::pair<double, std::string>> ranked;
      for (const auto& id : ids) ranked.emplace_back(-score(documents.at(q).text, id, k1, b), id);
      std::sort(ranked.begin(), ranked.end());
      std::vector<std::string> order;
      for (const auto& [s, id] : ranked) order.push_back(id);
      sum += testing::brute_average_precision(order, relevant.at(q));
    }
    return sum / static_cast<double>(lists.size());
  }
};

Outcome end_to_end() {
  Check check;
  const auto start = Clock::now();
  const auto corpus = testing::length_skew_corpus(20, {2, 2, 1, 1, 0, 0});
  auto gateway = responder_gateway(testing::ground_truth_responder(corpus));
  GenerateOptions options;
  options.t = 6;
  const auto generation = generate(corpus.documents, corpus.pools(), parse_method("pcs_llm"), *gateway, options);
  const auto& dataset = generation.dataset;
  check.require(dataset.records.size() == 20, "expected 20 records");
  double min_tau = 1.0;
  for (const auto& record : dataset.records) {
    std::vector<double> predicted, truth;
    for (const auto& c : record.candidates) {
      predicted.push_back(c.score);
      truth.push_back(static_cast<double>(c.grade.value_or(-1)));
    }
    min_tau = std::min(min_tau, kendall_tau_b(predicted, truth));
  }
  check.require(min_tau == 1.0, "tau_b below 1: " + fmt(min_tau, 6));

  std::vector<const Document*> candidates;
  for (const auto& j : corpus.judgments) candidates.push_back(&corpus.documents.at(j.doc_id));
  const auto index = Bm25Index::build(candidates);
  const auto signal = signal_from_dataset(dataset);
  const auto tuned = tune(index, corpus.documents, signal);
  const double default_map = tuned.history.front().objective;
  check.require(tuned.best_objective > default_map, "no strict improvement");

  const ReferenceBm25 reference(candidates);
  const auto relevance = signal_to_relevance(signal);
  std::map<std::string, std::vector<std::string>> lists;
  for (const auto& l : signal.lists) {
    for (const auto& e : l.entries) lists[l.query_id].push_back(e.doc_id);
  }
  const double oracle_default = reference.map(lists, relevance.relevant, corpus.documents, 1.5, 0.75);
  const double oracle_tuned = reference.map(lists, relevance.relevant, corpus.documents, tuned.best.k1, tuned.best.b);
  check.require(std::abs(oracle_default - default_map) < 1e-12, "default MAP disagrees with oracle");
  check.require(std::abs(oracle_tuned - tuned.best_objective) < 1e-12, "tuned MAP disagrees with oracle");
  double grid_best = -1;
  Bm25Params grid_arg{};
  for (int i = 0; i < 9; ++i) {
    for (int j = 0; j < 10; ++j) {
      const double k1 = 1.2 + 0.1 * i, b = 0.1 + 0.1 * j;
      const double m = reference.map(lists, relevance.relevant, corpus.documents, k1, b);
      if (m > grid_best) {
        grid_best = m;
        grid_arg = {k1, b};
      }
    }
  }
  check.require(grid_best > oracle_default, "grid finds no better point than the default");
  const double elapsed = seconds_since(start);
  check.require(elapsed < 60.0, "runtime " + fmt(elapsed, 2) + " s");
  if (check.outcome().pass) {
    check.outcome().detail = "tau_b=1 on 20 queries; MAP default " + fmt(default_map) + " -> tuned " +
                             fmt(tuned.best_objective) + " (k1=" + fmt(tuned.best.k1, 3) + " b=" +
                             fmt(tuned.best.b, 3) + "); grid optimum " + fmt(grid_best) + " at k1=" +
                             fmt(grid_arg.k1, 1) + " b=" + fmt(grid_arg.b, 1) + "; " + fmt(elapsed, 2) + " s";
  }
  return check.outcome();
}

Outcome noise_probe() {
  Check check;
  const auto corpus = testing::length_skew_corpus(40, {2, 2, 1, 1, 0, 0});
  const auto split = split_dataset(corpus.pools(), 42);
  const auto train_docs = training_documents(split, corpus.documents);
  const auto index = Bm25Index::build(train_docs);

  const auto truth_tuned = tune(index, corpus.documents, signal_from_grades(split.train_lists(), "ideal-train"));

  std::vector<CandidatePool> train_pools;
  for (const auto& [q, list] : split.train_lists()) train_pools.push_back({q, list});
  const auto method = parse_method("pcs_llm");
  std::stringstream fixtures;
  write_ground_truth_fixtures(fixtures, corpus.documents, train_pools, method, PromptTemplates::defaults(),
                              {0.3, 42});
  testing::TempDir dir;
  testing::write_file(dir / "noisy.jsonl", fixtures.str());
  GatewayConfig config;
  config.model = "stub";
  Gateway gateway(config, StubBackend::load(dir / "noisy.jsonl"));
  const auto noisy = generate(corpus.documents, train_pools, method, gateway, {});
  const auto noise_tuned = tune(index, corpus.documents, signal_from_dataset(noisy.dataset));

  const double truth_map = evaluate_tuned(truth_tuned.best, index, corpus.documents, split.test_lists).summary.mean.map;
  const double noise_map = evaluate_tuned(noise_tuned.best, index, corpus.documents, split.test_lists).summary.mean.map;
  check.require(noise_map <= truth_map, "noise-tuned " + fmt(noise_map) + " > truth-tuned " + fmt(truth_map));
  if (check.outcome().pass) {
    check.outcome().detail = "test MAP noise-tuned " + fmt(noise_map) + " <= truth-tuned " + fmt(truth_map) + " (" +
                             std::to_string(split.train_queries().size()) + " train, " +
                             std::to_string(split.test_lists.size()) + " test queries)";
  }
  return check.outcome();
}

Outcome split_invariants() {
  Check check;
  const auto pools = testing::topical_corpus(200, 40, 17).pools();
  const auto split = split_dataset(pools, 42);
  std::map<std::string, std::map<int, int>> per_grade;
  std::set<std::string> train_docs;
  for (const auto& p : split.train_pairs) {
    ++per_grade[p.query_id][p.grade];
    train_docs.insert(p.doc_id);
  }
  for (const auto& [q, list] : split.test_lists) {
    for (const auto& c : list) {
      ++per_grade[q][c.grade];
      check.require(!train_docs.contains(c.doc_id), "document in both train and test");
    }
  }
  for (const auto& [q, grades] : per_grade) {
    for (const auto& [g, count] : grades) check.require(count <= 10, "more than 10 candidates of one grade");
  }
  check.require(split.pure_test_queries.size() == 40, "pure-test count " + std::to_string(split.pure_test_queries.size()));
  check.require(split.train_pairs.size() <= 100, "train pairs over budget");
  for (const auto& [q, list] : split.train_lists()) {
    check.require(list.size() >= 2, "train query with fewer than 2 candidates");
    check.require(!split.pure_test_queries.contains(q), "pure-test query in train");
  }
  testing::TempDir dir;
  save_split(split, dir / "a.jsonl");
  save_split(split_dataset(pools, 42), dir / "b.jsonl");
  check.require(testing::read_file(dir / "a.jsonl") == testing::read_file(dir / "b.jsonl"), "re-run differs");
  if (check.outcome().pass) {
    check.outcome().detail = std::to_string(split.train_pairs.size()) + " train pairs over " +
                             std::to_string(split.train_queries().size()) + " queries, 40 pure-test, rerun identical";
  }
  return check.outcome();
}

Outcome review_event_sourcing() {
  Check check;
  const auto corpus = testing::topical_corpus(5, 4, 23);
  auto gateway = responder_gateway(testing::ground_truth_responder(corpus));
  std::vector<RerankResult> results;
  for (const auto& pool : corpus.pools()) {
    std::vector<Document> docs;
    for (const auto& c : pool.candidates) docs.push_back(corpus.documents.at(c.doc_id));
    results.push_back(rerank(corpus.documents.at(pool.query_id), docs, parse_method("pcs_llm"), *gateway));
  }
  testing::TempDir dir;
  std::vector<ReviewItem> live;
  {
    ReviewStore store(dir.path(), 4);
    const auto ids = store.enqueue(results);
    ReviewAction reject{ReviewAction::Kind::reject, std::string("off topic"), {}, {}, {}, 0};
    store.apply_action(ids[0], 0, {});
    store.apply_action(ids[1], 0, reject);
    auto order = store.get(ids[2]).proposed.doc_ids();
    std::reverse(order.begin(), order.end());
    store.apply_action(ids[2], 0, {ReviewAction::Kind::correct, {}, order, {}, {}, 0});
    const auto p = store.get(ids[3]).proposed.doc_ids();
    store.apply_action(ids[3], 0, {ReviewAction::Kind::correct_pair, {}, {}, p[0], p[1], -1});
    store.apply_action(ids[0], 1, reject);
    live = store.list();
  }
  const auto replayed = ReviewStore::replay_log(dir.path());
  check.require(replayed.size() == live.size(), "replay item count");
  for (const auto& item : live) {
    check.require(replayed.contains(item.id) && replayed.at(item.id) == item, "replayed item differs");
  }
  ReviewStore reopened(dir.path(), 4);
  check.require(reopened.list() == live, "reopened store differs");

  int rounds_ok = 0;
  const long target = live.back().id;
  for (int round = 0; round < 50; ++round) {
    const auto item = reopened.get(target);
    std::latch start(2);
    std::atomic<int> ok{0}, conflicts{0};
    auto act = [&](ReviewAction action) {
      start.arrive_and_wait();
      try {
        reopened.apply_action(item.id, item.revision, action);
        ++ok;
      } catch (const RevisionConflictError&) {
        ++conflicts;
      }
    };
    std::thread a(act, ReviewAction{});
    std::thread b(act, ReviewAction{ReviewAction::Kind::reject, std::string("no"), {}, {}, {}, 0});
    a.join();
    b.join();
    check.require(ok == 1 && conflicts == 1, "round " + std::to_string(round) + ": " + std::to_string(ok.load()) +
                                                 " successes, " + std::to_string(conflicts.load()) + " conflicts");
    check.require(reopened.get(target).revision == item.revision + 1, "revision moved by more than one");
    if (ok == 1 && conflicts == 1) ++rounds_ok;
  }
  if (check.outcome().pass) {
    check.outcome().detail = std::to_string(live.size()) + " items replayed exactly; " + std::to_string(rounds_ok) +
                             " concurrent rounds with one success and one conflict";
  }
  return check.outcome();
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::err);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"metric-oracle", metric_oracle},
      {"constants", constants},
      {"pcs-aggregation", pcs_aggregation},
      {"end-to-end", end_to_end},
      {"noise-probe", noise_probe},
      {"split-invariants", split_invariants},
      {"review-event-sourcing", review_event_sourcing},
  };
  int failures = 0;
  for (const auto& [name, run] : criteria) {
    Outcome outcome;
    try {
      outcome = run();
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (outcome.pass ? "PASS " : "FAIL ") << name << ": " << outcome.detail << std::endl;
    failures += outcome.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
