#include "qbd/pipeline.h"

#include <gtest/gtest.h>

#include <sstream>

#include "qbd/error.h"
#include "support.h"

namespace qbd {
namespace {

using testing::TempDir;

GatewayConfig stub_config() {
  GatewayConfig c;
  c.model = "stub";
  c.max_retries = 0;
  return c;
}

std::unique_ptr<Gateway> truth_gateway(const testing::SyntheticCorpus& corpus) {
  auto stub = std::make_unique<StubBackend>();
  stub->set_responder(testing::ground_truth_responder(corpus));
  return std::make_unique<Gateway>(stub_config(), std::move(stub));
}

std::string dump(const GeneratedDataset& dataset) {
  std::ostringstream out;
  write_dataset(dataset, out);
  return out.str();
}

TEST(Filter, SizeAndGradeDiversity) {
  const std::vector<PoolCandidate> same = {{"a", 1}, {"b", 1}, {"c", 1}};
  const std::vector<PoolCandidate> mixed = {{"a", 2}, {"b", 0}};
  EXPECT_TRUE(apply_filter(same, {}));
  EXPECT_FALSE(apply_filter(same, {2, 30, true}));
  EXPECT_TRUE(apply_filter(mixed, {2, 30, true}));
  EXPECT_FALSE(apply_filter(mixed, {3, 30, false}));
  EXPECT_FALSE(apply_filter(same, {1, 2, false}));
  EXPECT_THROW(validate(FilterSpec{0, 5, false}), DataError);
  EXPECT_THROW(validate(FilterSpec{6, 5, false}), DataError);
}

TEST(OracleStatus, Names) {
  for (auto s : {OracleStatus::unreviewed, OracleStatus::accepted, OracleStatus::corrected, OracleStatus::rejected}) {
    EXPECT_EQ(oracle_status_from(to_string(s)), s);
  }
  EXPECT_THROW(oracle_status_from("maybe"), DataError);
}

TEST(Generate, ProducesFilteredRankedRecords) {
  auto corpus = testing::topical_corpus(4, 6, 3);
  for (auto& j : corpus.judgments) {
    if (j.query_id == "q002") j.grade = 1;
  }
  auto gateway = truth_gateway(corpus);
  GenerateOptions options;
  options.filter = {2, 30, true};
  options.t = 4;
  options.seed = 11;
  const auto generation = generate(corpus.documents, corpus.pools(), parse_method("pcs_llm"), *gateway, options);
  const auto& dataset = generation.dataset;
  ASSERT_EQ(dataset.records.size(), 3u);
  ASSERT_EQ(generation.results.size(), 3u);
  for (const auto& r : dataset.records) {
    EXPECT_NE(r.query_id, "q002");
    EXPECT_EQ(r.candidates.size(), 4u);
    EXPECT_EQ(r.pool_size, 6u);
    EXPECT_TRUE(record_satisfies(r, options.filter));
    EXPECT_EQ(r.method, "pcs_llm");
    for (std::size_t i = 1; i < r.candidates.size(); ++i) {
      EXPECT_GE(*r.candidates[i - 1].grade, *r.candidates[i].grade);
    }
  }
  EXPECT_EQ(dataset.records[0].result_id, generation.results[0].id);
  EXPECT_EQ(dataset.manifest.t, 4u);
  EXPECT_EQ(dataset.manifest.seed, 11u);
  EXPECT_EQ(dataset.manifest.ledger["complete"]["requests"], 90);
  EXPECT_TRUE(dataset.manifest.failures.empty());
}

TEST(Generate, PerQueryFailuresAreRecorded) {
  const auto corpus = testing::topical_corpus(3, 3, 5);
  const std::string bad_query = corpus.documents.at("q001").text;
  auto truth = testing::ground_truth_responder(corpus);
  auto stub = std::make_unique<StubBackend>();
  stub->set_responder([&](const std::string& prompt) -> std::string {
    if (prompt.find("Query document:\n" + bad_query + "\n") != std::string::npos) throw TransientError("down");
    return truth(prompt);
  });
  Gateway gateway(stub_config(), std::move(stub));
  const auto generation = generate(corpus.documents, corpus.pools(), parse_method("scs_llm"), gateway, {});
  EXPECT_EQ(generation.dataset.records.size(), 2u);
  ASSERT_EQ(generation.dataset.manifest.failures.size(), 1u);
  EXPECT_EQ(generation.dataset.manifest.failures[0].query_id, "q001");
}

TEST(Generate, RejectsEmptySelectionAndBadOptions) {
  const auto corpus = testing::topical_corpus(2, 3, 5);
  auto gateway = truth_gateway(corpus);
  GenerateOptions options;
  options.filter = {10, 30, false};
  EXPECT_THROW(generate(corpus.documents, corpus.pools(), parse_method("pcs_llm"), *gateway, options), DataError);
  options = {};
  options.t = 0;
  EXPECT_THROW(generate(corpus.documents, corpus.pools(), parse_method("pcs_llm"), *gateway, options), DataError);
}

TEST(ConfigHash, ChangesWithEverySetting) {
  const auto method = parse_method("scs_llm");
  const GenerateOptions base;
  const GatewayConfig gw = stub_config();
  const auto h = generation_config_hash(method, base, gw);
  EXPECT_EQ(h, generation_config_hash(method, base, gw));
  auto options = base;
  options.t = 10;
  EXPECT_NE(h, generation_config_hash(method, options, gw));
  options = base;
  options.templates.single += " ";
  EXPECT_NE(h, generation_config_hash(method, options, gw));
  auto other_gw = gw;
  other_gw.model = "other";
  EXPECT_NE(h, generation_config_hash(method, base, other_gw));
  EXPECT_NE(h, generation_config_hash(parse_method("scs_instr", std::string("x")), base, gw));
}

TEST(DatasetFile, RoundTripsAndSkipsRejected) {
  TempDir dir;
  const auto corpus = testing::topical_corpus(3, 4, 2);
  auto gateway = truth_gateway(corpus);
  auto dataset = generate(corpus.documents, corpus.pools(), parse_method("scs_llm"), *gateway, {}).dataset;
  export_dataset(dataset, dir / "d.jsonl");
  EXPECT_EQ(import_dataset(dir / "d.jsonl"), dataset);

  dataset.records[1].oracle_status = OracleStatus::rejected;
  export_dataset(dataset, dir / "d.jsonl");
  const auto back = import_dataset(dir / "d.jsonl");
  ASSERT_EQ(back.records.size(), 2u);
  EXPECT_EQ(back.records[0], dataset.records[0]);
  EXPECT_EQ(back.records[1], dataset.records[2]);
}

TEST(DatasetFile, DetectsVersionMismatch) {
  GeneratedDataset dataset;
  dataset.manifest.version = 2;
  try {
    parse_dataset(dump(dataset));
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}

TEST(DatasetFile, DetectsTruncation) {
  GeneratedDataset dataset;
  dataset.records.push_back({"q", "pcs_llm", OracleStatus::unreviewed, {{"a", 2, 1, 1}}, 1, 1, "r"});
  dataset.records.push_back({"q2", "pcs_llm", OracleStatus::unreviewed, {{"b", 0, 1, {}}}, 1, 1, "s"});
  const auto text = dump(dataset);
  EXPECT_EQ(parse_dataset(text), dataset);
  EXPECT_THROW(parse_dataset(text.substr(0, text.size() - 5)), DataError);
  const auto first_record_end = text.find('\n', text.find('\n') + 1) + 1;
  try {
    parse_dataset(text.substr(0, first_record_end));
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
}

TEST(DatasetFile, SchemaErrorsNameTheOffset) {
  GeneratedDataset dataset;
  const auto manifest_line = dump(dataset);
  const auto text = manifest_line + "{\"query_id\": 5}\n";
  try {
    parse_dataset(text);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset " + std::to_string(manifest_line.size())), std::string::npos);
  }
  EXPECT_THROW(parse_dataset("{\"format\": \"other\"}\n"), DataError);
  EXPECT_THROW(parse_dataset(""), DataError);
}

TEST(SignalFromDataset, DefaultRulesFollowTheMethod) {
  GeneratedDataset dataset;
  dataset.manifest.method = "pcs_llm";
  dataset.records.push_back({"q", "pcs_llm", OracleStatus::accepted, {{"a", 4, 1, {}}, {"b", 0, 2, {}}, {"c", -4, 3, {}}}, 3, 1, "r"});
  dataset.records.push_back({"x", "pcs_llm", OracleStatus::rejected, {{"z", 2, 1, {}}}, 1, 1, "s"});
  auto signal = signal_from_dataset(dataset);
  ASSERT_EQ(signal.lists.size(), 1u);
  EXPECT_EQ(signal.rule.kind, RelevanceRule::Kind::positive_total);
  EXPECT_EQ(signal_to_relevance(signal).relevant.at("q"), (std::set<std::string>{"a"}));

  dataset.manifest.method = "scs_llm";
  signal = signal_from_dataset(dataset, std::nullopt, -4.0);
  EXPECT_EQ(signal.rule.kind, RelevanceRule::Kind::score_cutoff);
  EXPECT_EQ(signal_to_relevance(signal).relevant.at("q"), (std::set<std::string>{"a", "b", "c"}));

  signal = signal_from_dataset(dataset, RelevanceRule::parse("top:1"));
  EXPECT_EQ(signal_to_relevance(signal).relevant.at("q"), (std::set<std::string>{"a"}));
}

}  // namespace
}  // namespace qbd
