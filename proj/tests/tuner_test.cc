#include "qbd/tuner.h"

#include <gtest/gtest.h>

#include <algorithm>

#include "qbd/error.h"
#include "support.h"

namespace qbd {
namespace {

std::vector<const Document*> candidate_docs(const testing::SyntheticCorpus& corpus) {
  std::vector<const Document*> out;
  for (const auto& j : corpus.judgments) out.push_back(&corpus.documents.at(j.doc_id));
  return out;
}

std::map<std::string, std::vector<PoolCandidate>> lists_of(const testing::SyntheticCorpus& corpus) {
  std::map<std::string, std::vector<PoolCandidate>> out;
  for (const auto& j : corpus.judgments) out[j.query_id].push_back({j.doc_id, j.grade});
  return out;
}

TEST(RelevanceRule, ParsesAndDescribes) {
  for (const auto* text : {"grade>=1", "positive", "cutoff:0.5", "top:3"}) {
    EXPECT_EQ(RelevanceRule::parse(text).describe(), text);
  }
  EXPECT_EQ(RelevanceRule::parse("top:2").k, 2);
  EXPECT_THROW(RelevanceRule::parse("top:0"), DataError);
  EXPECT_THROW(RelevanceRule::parse("cutoff:x"), DataError);
  EXPECT_THROW(RelevanceRule::parse("best"), DataError);
}

TEST(SignalToRelevance, AppliesEachRule) {
  TrainingSignal signal;
  signal.lists = {{"q1", {{"a", 4}, {"b", 0}, {"c", -4}}}, {"q2", {{"x", 0}, {"y", -2}}}};
  signal.rule = RelevanceRule::parse("positive");
  auto sets = signal_to_relevance(signal);
  EXPECT_EQ(sets.relevant.at("q1"), (std::set<std::string>{"a"}));
  EXPECT_EQ(sets.excluded, std::vector<std::string>{"q2"});

  signal.rule = RelevanceRule::parse("cutoff:0");
  sets = signal_to_relevance(signal);
  EXPECT_EQ(sets.relevant.at("q1"), (std::set<std::string>{"a", "b"}));
  EXPECT_EQ(sets.relevant.at("q2"), (std::set<std::string>{"x"}));

  signal.rule = RelevanceRule::parse("top:1");
  signal.lists[0].entries.push_back({"d", 4});
  sets = signal_to_relevance(signal);
  EXPECT_EQ(sets.relevant.at("q1"), (std::set<std::string>{"a", "d"}));

  signal.lists.clear();
  EXPECT_THROW(signal_to_relevance(signal), DataError);
}

TEST(SignalFromGrades, UsesThreshold) {
  const std::map<std::string, std::vector<PoolCandidate>> lists = {{"q", {{"a", 2}, {"b", 1}, {"c", 0}}}};
  const auto signal = signal_from_grades(lists, "ideal-train", 2);
  EXPECT_EQ(signal.provenance, "ideal-train");
  EXPECT_EQ(signal_to_relevance(signal).relevant.at("q"), (std::set<std::string>{"a"}));
}

TEST(TrialPoints, DefaultFirstThenSeededDrawsInRange) {
  TuneConfig config;
  config.seed = 7;
  const auto points = trial_points(config);
  ASSERT_EQ(points.size(), 50u);
  EXPECT_EQ(points[0], kDefaultBm25Params);
  for (std::size_t i = 1; i < points.size(); ++i) {
    EXPECT_GE(points[i].k1, 1.2);
    EXPECT_LE(points[i].k1, 2.0);
    EXPECT_GE(points[i].b, 0.1);
    EXPECT_LE(points[i].b, 1.0);
  }
  EXPECT_EQ(trial_points(config), points);
  config.seed = 8;
  EXPECT_NE(trial_points(config), points);
}

TEST(TrialPoints, GridCoversTheBoxInclusively) {
  TuneConfig config;
  config.mode = TuneConfig::Mode::grid;
  const auto points = trial_points(config);
  ASSERT_EQ(points.size(), 91u);
  EXPECT_EQ(points[0], kDefaultBm25Params);
  EXPECT_DOUBLE_EQ(points[1].k1, 1.2);
  EXPECT_DOUBLE_EQ(points[1].b, 0.1);
  EXPECT_DOUBLE_EQ(points.back().k1, 2.0);
  EXPECT_DOUBLE_EQ(points.back().b, 1.0);
}

TEST(TuneConfig, Validation) {
  TuneConfig config;
  config.n_trials = 0;
  EXPECT_THROW(validate(config), DataError);
  config = {};
  config.b_range = {0.5, 1.5};
  EXPECT_THROW(validate(config), DataError);
  config = {};
  config.k1_range = {2.0, 1.2};
  EXPECT_THROW(validate(config), DataError);
}

TEST(Tune, EarliestBestTrialWinsOnTies) {
  // One relevant document that alone contains the query term: every
  // parameter setting scores MAP 1.
  const std::vector<Document> docs_v = {{"a", "apple pie", {}}, {"b", "banana bread", {}}, {"c", "cherry tart", {}}};
  DocumentMap documents = {{"q", {"q", "apple", {}}}};
  for (const auto& d : docs_v) documents[d.id] = d;
  const auto index = Bm25Index::build(docs_v);
  const auto signal = signal_from_grades({{"q", {{"a", 2}, {"b", 0}, {"c", 0}}}}, "ideal-train");
  const auto result = tune(index, documents, signal);
  EXPECT_EQ(result.best, kDefaultBm25Params);
  EXPECT_DOUBLE_EQ(result.best_objective, 1.0);
  EXPECT_EQ(result.history.size(), 50u);
  EXPECT_EQ(result.queries_used, 1u);
}

TEST(Tune, FindsStrongerLengthNormalization) {
  const auto corpus = testing::length_skew_corpus(20, {2, 2, 1, 1, 0, 0});
  const auto index = Bm25Index::build(candidate_docs(corpus));
  const auto signal = signal_from_grades(lists_of(corpus), "ideal-train", 2);
  const auto result = tune(index, corpus.documents, signal);
  EXPECT_GT(result.best_objective, result.history[0].objective);
  EXPECT_GT(result.best.b, 0.75);
  for (const auto& t : result.history) EXPECT_LE(t.objective, result.best_objective);
  EXPECT_EQ(result.unindexed_candidates, 0u);
}

TEST(Tune, ExcludesQueriesWithoutRelevantDocuments) {
  const auto corpus = testing::length_skew_corpus(3, {2, 2, 1, 1, 0, 0});
  auto lists = lists_of(corpus);
  for (auto& c : lists.begin()->second) c.grade = 0;
  const auto index = Bm25Index::build(candidate_docs(corpus));
  const auto result = tune(index, corpus.documents, signal_from_grades(lists, "ideal-train"));
  EXPECT_EQ(result.queries_used, 2u);
  EXPECT_EQ(result.excluded_queries, std::vector<std::string>{lists.begin()->first});
}

TEST(Tune, MissingDocumentTextIsAnError) {
  const auto corpus = testing::length_skew_corpus(2, {2, 2, 1, 1, 0, 0});
  const auto index = Bm25Index::build(candidate_docs(corpus));
  auto lists = lists_of(corpus);
  lists.begin()->second.push_back({"ghost", 2});
  EXPECT_THROW(tune(index, corpus.documents, signal_from_grades(lists, "x")), DataError);
}

TEST(EvaluateTuned, AgreesWithTuneObjective) {
  const auto corpus = testing::length_skew_corpus(10, {2, 2, 1, 1, 0, 0}, 4);
  const auto index = Bm25Index::build(candidate_docs(corpus));
  const auto lists = lists_of(corpus);
  TuneConfig config;
  config.n_trials = 10;
  const auto result = tune(index, corpus.documents, signal_from_grades(lists, "ideal-train", 1), config);
  for (const auto& trial : result.history) {
    const auto eval = evaluate_tuned(trial.params, index, corpus.documents, lists, 1);
    EXPECT_NEAR(eval.summary.mean.map, trial.objective, 1e-12);
  }
  EXPECT_THROW(evaluate_tuned(kDefaultBm25Params, index, corpus.documents, {}), DataError);
}

TEST(TrainingDocuments, UniqueTrainCandidates) {
  DocumentMap documents = {{"a", {"a", "x", {}}}, {"b", {"b", "y", {}}}};
  DatasetSplit split;
  split.train_pairs = {{"q1", "a", 1}, {"q2", "a", 2}, {"q2", "b", 0}};
  const auto docs = training_documents(split, documents);
  ASSERT_EQ(docs.size(), 2u);
  EXPECT_EQ(docs[0]->id, "a");
  split.train_pairs.push_back({"q3", "zz", 1});
  EXPECT_THROW(training_documents(split, documents), DataError);
  EXPECT_THROW(training_documents(DatasetSplit{}, documents), DataError);
}

TEST(TuneResultJson, RoundTrips) {
  const auto corpus = testing::length_skew_corpus(4, {2, 2, 1, 1, 0, 0});
  const auto index = Bm25Index::build(candidate_docs(corpus));
  TuneConfig config;
  config.n_trials = 5;
  const auto result = tune(index, corpus.documents, signal_from_grades(lists_of(corpus), "ideal-train"), config);
  const auto back = tune_result_from_json(to_json(result));
  EXPECT_EQ(to_json(back), to_json(result));
  EXPECT_EQ(back.best, result.best);
  EXPECT_THROW(tune_result_from_json(nlohmann::json::object()), DataError);
}

}  // namespace
}  // namespace qbd
