// qbd: command-line front end for the corpus, reranking, review and tuning
// workflow. Exit codes: 0 success, 1 usage, 2 data error, 3 gateway error.

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>

#include "qbd/bm25.h"
#include "qbd/corpus.h"
#include "qbd/error.h"
#include "qbd/llm_gateway.h"
#include "qbd/pipeline.h"
#include "qbd/rerank.h"
#include "qbd/review_http.h"
#include "qbd/review_service.h"
#include "qbd/tuner.h"

namespace {

using json = nlohmann::json;
using qbd::DataError;

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitGateway = 3;

struct Common {
  bool json_output = false;
  bool verbose = false;
  bool quiet = false;
};

struct CorpusArgs {
  std::string documents = "fixtures/documents.jsonl";
  std::string judgments = "fixtures/qrels.txt";
};

struct GatewayArgs {
  std::string stub;
  std::string base_url = qbd::GatewayConfig{}.base_url;
  std::string model = "gpt-4o-mini";
  std::string embedding_model = "text-embedding-3-small";
  int parallelism = 4;
  int max_retries = 3;
  int timeout_ms = 60000;
};

void emit(const Common& common, const json& payload, const std::string& human) {
  if (common.json_output) {
    std::cout << payload.dump(2) << '\n';
  } else {
    std::cout << human;
  }
}

std::string fixed(double v, int digits = 4) {
  char buffer[64];
  std::snprintf(buffer, sizeof buffer, "%.*f", digits, v);
  return buffer;
}

std::string metric_table(const qbd::EvaluationSummary& s) {
  std::ostringstream out;
  auto row = [&](const std::string& name, double value, std::size_t undefined) {
    out << "  " << name << std::string(name.size() < 10 ? 10 - name.size() : 1, ' ');
    if (undefined == s.queries) {
      out << "undefined\n";
      return;
    }
    out << fixed(value);
    if (undefined > 0) out << "  (" << undefined << " undefined)";
    out << '\n';
  };
  out << "queries   " << s.queries << '\n';
  row("tau_b", s.mean.tau_b, s.undefined_tau_b);
  row("spearman", s.mean.spearman_rho, s.undefined_spearman);
  row("map", s.mean.map, s.undefined_average_precision);
  row("mrr", s.mean.mrr, 0);
  for (const auto& [k, p] : s.mean.precision_at_k) row("p@" + std::to_string(k), p, 0);
  return out.str();
}

std::vector<qbd::CandidatePool> pools_from_lists(const std::map<std::string, std::vector<qbd::PoolCandidate>>& lists) {
  std::vector<qbd::CandidatePool> pools;
  for (const auto& [query, candidates] : lists) pools.push_back({query, candidates});
  return pools;
}

qbd::Bm25Index load_or_build_index(const std::string& index_path, const qbd::DatasetSplit& split,
                                   const qbd::DocumentMap& documents) {
  if (!index_path.empty()) return qbd::Bm25Index::load(index_path);
  return qbd::Bm25Index::build(qbd::training_documents(split, documents));
}

std::unique_ptr<qbd::Gateway> make_gateway(const GatewayArgs& args) {
  qbd::GatewayConfig config;
  config.base_url = args.base_url;
  config.model = args.model;
  config.embedding_model = args.embedding_model;
  config.parallelism = args.parallelism;
  config.max_retries = args.max_retries;
  config.timeout = std::chrono::milliseconds(args.timeout_ms);
  qbd::validate(config);
  std::unique_ptr<qbd::Backend> backend;
  if (!args.stub.empty()) {
    backend = qbd::StubBackend::load(args.stub);
    config.model = "stub";
    config.embedding_model = "stub";
  } else {
    backend = qbd::OpenAiBackend::from_environment(config);
  }
  return std::make_unique<qbd::Gateway>(config, std::move(backend));
}

void add_corpus_options(CLI::App* cmd, CorpusArgs& args, bool judgments) {
  cmd->add_option("--documents", args.documents, "Documents JSONL (id, text)")
      ->check(CLI::ExistingFile)
      ->capture_default_str();
  if (judgments) {
    cmd->add_option("--judgments", args.judgments, "Graded judgments (query 0 doc grade)")
        ->check(CLI::ExistingFile)
        ->capture_default_str();
  }
}

void add_gateway_options(CLI::App* cmd, GatewayArgs& args) {
  cmd->add_option("--stub", args.stub, "Answer from a stub fixture file instead of the network")
      ->check(CLI::ExistingFile);
  cmd->add_option("--base-url", args.base_url, "OpenAI-compatible endpoint")->capture_default_str();
  cmd->add_option("--model", args.model, "Chat model")->capture_default_str();
  cmd->add_option("--embedding-model", args.embedding_model, "Embedding model")->capture_default_str();
  cmd->add_option("--parallelism", args.parallelism, "Concurrent gateway calls")->capture_default_str();
  cmd->add_option("--max-retries", args.max_retries, "Retries for transient failures")->capture_default_str();
  cmd->add_option("--timeout-ms", args.timeout_ms, "Per-request timeout")->capture_default_str();
}

// --- ingest ----------------------------------------------------------------

struct IngestArgs {
  CorpusArgs corpus;
};

void run_ingest(const Common& common, const IngestArgs& args) {
  const auto corpus = qbd::load_corpus(args.corpus.documents, args.corpus.judgments);
  const auto pools = qbd::build_pools(corpus.judgments);
  std::map<int, std::size_t> grades;
  std::size_t largest = 0;
  for (const auto& pool : pools) {
    largest = std::max(largest, pool.candidates.size());
    for (const auto& c : pool.candidates) ++grades[c.grade];
  }
  json grade_json = json::object();
  for (const auto& [g, n] : grades) grade_json[std::to_string(g)] = n;
  const json payload = {{"documents", corpus.documents.size()},
                        {"judgments", corpus.judgments.size()},
                        {"queries", pools.size()},
                        {"largest_pool", largest},
                        {"grades", grade_json}};
  std::ostringstream human;
  human << "documents " << corpus.documents.size() << "\njudgments " << corpus.judgments.size()
        << "\nqueries   " << pools.size() << "\nlargest pool " << largest << "\ngrade counts";
  for (const auto& [g, n] : grades) human << "  " << g << ":" << n;
  human << '\n';
  emit(common, payload, human.str());
}

// --- split -----------------------------------------------------------------

struct SplitArgs {
  CorpusArgs corpus;
  std::uint64_t seed = 0;
  qbd::SplitOptions options;
  std::string out = "split.jsonl";
  std::string index_out;
};

void run_split(const Common& common, const SplitArgs& args) {
  const auto corpus = qbd::load_corpus(args.corpus.documents, args.corpus.judgments);
  const auto split = qbd::split_dataset(qbd::build_pools(corpus.judgments), args.seed, args.options);
  qbd::save_split(split, args.out);
  json payload = {{"out", args.out},
                  {"seed", args.seed},
                  {"train_pairs", split.train_pairs.size()},
                  {"train_queries", split.train_queries().size()},
                  {"test_queries", split.test_lists.size()},
                  {"pure_test_queries", split.pure_test_queries.size()},
                  {"removed_for_disjointness", split.removed_for_disjointness}};
  if (!args.index_out.empty()) {
    const auto index = qbd::Bm25Index::build(qbd::training_documents(split, corpus.documents));
    index.save(args.index_out);
    payload["index"] = args.index_out;
    payload["indexed_documents"] = index.doc_count();
  }
  std::ostringstream human;
  human << "wrote " << args.out << "\ntrain pairs   " << split.train_pairs.size() << " over "
        << split.train_queries().size() << " queries\ntest queries  " << split.test_lists.size() << " ("
        << split.pure_test_queries.size() << " pure)\ndropped for disjointness " << split.removed_for_disjointness
        << '\n';
  if (!args.index_out.empty()) human << "index " << args.index_out << '\n';
  emit(common, payload, human.str());
}

// --- rerank ----------------------------------------------------------------

struct RerankArgs {
  CorpusArgs corpus;
  GatewayArgs gateway;
  std::string split;
  std::string method = "pcs_llm";
  std::string instructions_file;
  std::string review_store;
  std::string templates;
  std::string out = "dataset.jsonl";
  std::string results;
  std::string enqueue;
  std::size_t min_candidates = 2;
  std::size_t max_candidates = 30;
  bool grade_diversity = false;
  std::size_t t = 30;
  std::uint64_t seed = 0;
};

void run_rerank(const Common& common, const RerankArgs& args) {
  const auto corpus = qbd::load_corpus(args.corpus.documents, args.corpus.judgments);
  std::optional<std::string> instructions;
  long instructions_version = 0;
  if (!args.instructions_file.empty()) {
    std::ifstream in(args.instructions_file, std::ios::binary);
    if (!in) throw DataError("cannot read " + args.instructions_file);
    instructions.emplace(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  } else if (!args.review_store.empty()) {
    qbd::ReviewStore store(args.review_store);
    const auto doc = store.instructions();
    if (doc.version > 0) {
      instructions = doc.text;
      instructions_version = doc.version;
    }
  }
  const auto method = qbd::parse_method(args.method, instructions, instructions_version);

  const auto pools = args.split.empty() ? qbd::build_pools(corpus.judgments)
                                        : pools_from_lists(qbd::load_split(args.split).train_lists());
  qbd::GenerateOptions options;
  options.filter = {args.min_candidates, args.max_candidates, args.grade_diversity};
  options.t = args.t;
  options.seed = args.seed;
  if (!args.templates.empty()) options.templates = qbd::PromptTemplates::load(args.templates);

  auto gateway = make_gateway(args.gateway);
  const auto generation = qbd::generate(corpus.documents, pools, method, *gateway, options);
  const auto& dataset = generation.dataset;
  qbd::export_dataset(dataset, args.out);
  if (!args.results.empty()) qbd::write_results(generation.results, args.results);
  std::vector<long> enqueued;
  if (!args.enqueue.empty()) {
    qbd::ReviewStore store(args.enqueue);
    enqueued = store.enqueue(generation.results);
  }

  const auto ledger = gateway->ledger();
  const json payload = {{"out", args.out},
                        {"method", method.name()},
                        {"records", dataset.records.size()},
                        {"failures", dataset.manifest.failures.size()},
                        {"config_hash", dataset.manifest.config_hash},
                        {"enqueued", enqueued.size()},
                        {"ledger", qbd::to_json(ledger)}};
  std::ostringstream human;
  human << "method   " << method.name() << "\nrecords  " << dataset.records.size() << "\nfailures "
        << dataset.manifest.failures.size() << "\ncalls    " << ledger.complete.requests << " completion, "
        << ledger.embed.requests << " embedding (" << ledger.complete.retries + ledger.embed.retries
        << " retries)\nwrote    " << args.out << '\n';
  if (!enqueued.empty()) human << "enqueued " << enqueued.size() << " items in " << args.enqueue << '\n';
  emit(common, payload, human.str());
  if (dataset.records.empty() && !dataset.manifest.failures.empty()) {
    throw qbd::GatewayError("every query failed to rerank; see manifest failures");
  }
}

// --- review-serve ----------------------------------------------------------

struct ServeArgs {
  std::string store = "review";
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string static_dir;
  std::string results;
};

void run_serve(const Common& common, const ServeArgs& args) {
  qbd::ReviewStore store(args.store);
  if (!args.results.empty()) {
    const auto results = qbd::read_results(args.results);
    store.enqueue(results);
  }
  qbd::ReviewServerOptions options;
  options.host = args.host;
  options.port = args.port;
  if (!args.static_dir.empty()) options.static_dir = args.static_dir;
  qbd::ReviewServer server(store, options);
  const int port = server.bind();
  const json payload = {{"host", args.host}, {"port", port}, {"items", store.list().size()}};
  emit(common, payload,
       "serving " + std::to_string(store.list().size()) + " items on http://" + args.host + ":" +
           std::to_string(port) + "\n");
  std::cout.flush();
  server.run();
}

// --- tune ------------------------------------------------------------------

struct TuneArgs {
  CorpusArgs corpus;
  std::string split = "split.jsonl";
  std::string signal = "ideal-train";
  std::string rule;
  double scs_cutoff = 0.0;
  std::string index;
  qbd::TuneConfig config;
  bool grid = false;
  std::string out;
};

void run_tune(const Common& common, const TuneArgs& args) {
  const auto documents = qbd::load_documents(args.corpus.documents);
  const auto split = qbd::load_split(args.split);
  qbd::TrainingSignal signal;
  if (args.signal == "ideal-train") {
    signal = qbd::signal_from_grades(split.train_lists(), "ideal-train");
  } else if (args.signal == "ideal-test") {
    signal = qbd::signal_from_grades(split.test_lists, "ideal-test");
  } else {
    std::optional<qbd::RelevanceRule> rule;
    if (!args.rule.empty()) rule = qbd::RelevanceRule::parse(args.rule);
    signal = qbd::signal_from_dataset(qbd::import_dataset(args.signal), rule, args.scs_cutoff);
  }
  if (!args.rule.empty() && args.signal.starts_with("ideal-")) signal.rule = qbd::RelevanceRule::parse(args.rule);

  auto config = args.config;
  if (args.grid) config.mode = qbd::TuneConfig::Mode::grid;
  const auto index = load_or_build_index(args.index, split, documents);
  const auto result = qbd::tune(index, documents, signal, config);
  if (!args.out.empty()) {
    std::ofstream out(args.out, std::ios::binary);
    out << qbd::to_json(result).dump(2) << '\n';
    if (!out) throw DataError("cannot write " + args.out);
  }
  const double default_map = result.history.front().objective;
  std::ostringstream human;
  human << "signal   " << result.provenance << " (" << result.rule << "), " << result.queries_used << " queries";
  if (!result.excluded_queries.empty()) human << ", " << result.excluded_queries.size() << " excluded";
  human << "\nbest     k1=" << fixed(result.best.k1) << " b=" << fixed(result.best.b)
        << "\nmap      " << fixed(result.best_objective) << " (default " << fixed(default_map) << ")\n";
  if (common.verbose) {
    human << "\ntrial  k1      b       map\n";
    for (const auto& t : result.history) {
      human << std::to_string(t.index) << std::string(7 - std::min<std::size_t>(6, std::to_string(t.index).size()), ' ')
            << fixed(t.params.k1) << "  " << fixed(t.params.b) << "  " << fixed(t.objective) << '\n';
    }
  }
  emit(common, qbd::to_json(result), human.str());
}

// --- evaluate --------------------------------------------------------------

struct EvaluateArgs {
  CorpusArgs corpus;
  std::string split = "split.jsonl";
  std::string params;
  std::optional<double> k1;
  std::optional<double> b;
  std::string index;
  int threshold = 1;
  std::vector<int> cutoffs = qbd::kDefaultPrecisionCutoffs;
};

void run_evaluate(const Common& common, const EvaluateArgs& args) {
  const auto documents = qbd::load_documents(args.corpus.documents);
  const auto split = qbd::load_split(args.split);
  qbd::Bm25Params params = qbd::kDefaultBm25Params;
  if (!args.params.empty()) {
    std::ifstream in(args.params, std::ios::binary);
    if (!in) throw DataError("cannot read " + args.params);
    try {
      params = qbd::tune_result_from_json(json::parse(in)).best;
    } catch (const json::exception& e) {
      throw DataError(args.params + ": " + e.what());
    }
  }
  if (args.k1) params.k1 = *args.k1;
  if (args.b) params.b = *args.b;
  qbd::validate(params);
  const auto index = load_or_build_index(args.index, split, documents);
  const auto evaluation =
      qbd::evaluate_tuned(params, index, documents, split.test_lists, args.threshold, args.cutoffs);
  json payload = qbd::to_json(evaluation.summary);
  payload["k1"] = params.k1;
  payload["b"] = params.b;
  payload["unindexed_candidates"] = evaluation.unindexed_candidates;
  emit(common, payload,
       "params    k1=" + fixed(params.k1) + " b=" + fixed(params.b) + "\n" + metric_table(evaluation.summary));
}

// --- export ----------------------------------------------------------------

struct ExportArgs {
  std::string store = "review";
  std::string out = "reviewed.jsonl";
  std::vector<std::string> statuses{"accepted", "corrected"};
};

void run_export(const Common& common, const ExportArgs& args) {
  if (!std::filesystem::is_directory(args.store)) throw DataError("no review store at " + args.store);
  qbd::ReviewStore store(args.store);
  std::set<qbd::ReviewStatus> statuses;
  for (const auto& s : args.statuses) statuses.insert(qbd::review_status_from(s));
  const auto dataset = store.export_reviewed(statuses);
  qbd::export_dataset(dataset, args.out);
  emit(common, {{"out", args.out}, {"records", dataset.records.size()}},
       "exported " + std::to_string(dataset.records.size()) + " records to " + args.out + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  auto logger = spdlog::stderr_color_mt("qbd");
  spdlog::set_default_logger(logger);

  CLI::App app{"Query-by-document reranking, review and BM25 tuning"};
  app.require_subcommand(1);
  Common common;
  app.add_flag("--json", common.json_output, "Machine-readable JSON on stdout");
  app.add_flag("-v,--verbose", common.verbose, "Debug logging and detailed tables");
  app.add_flag("-q,--quiet", common.quiet, "Only log errors");

  IngestArgs ingest;
  auto* ingest_cmd = app.add_subcommand("ingest", "Validate a corpus and summarize its judgment pools");
  add_corpus_options(ingest_cmd, ingest.corpus, true);

  SplitArgs split;
  auto* split_cmd = app.add_subcommand("split", "Sample a seeded train/test split");
  add_corpus_options(split_cmd, split.corpus, true);
  split_cmd->add_option("--seed", split.seed, "Sampling seed")->capture_default_str();
  split_cmd->add_option("--per-grade-cap", split.options.per_grade_cap, "Candidates kept per grade")
      ->capture_default_str();
  split_cmd->add_option("--pure-test-fraction", split.options.pure_test_fraction, "Queries held out entirely")
      ->capture_default_str();
  split_cmd->add_option("--train-budget", split.options.train_pair_budget, "Training pair budget")
      ->capture_default_str();
  split_cmd->add_option("--out", split.out, "Split file")->capture_default_str();
  split_cmd->add_option("--index-out", split.index_out, "Also write the BM25 index of the training documents");

  RerankArgs rerank;
  auto* rerank_cmd = app.add_subcommand("rerank", "Rerank candidate pools with an LLM or embeddings");
  add_corpus_options(rerank_cmd, rerank.corpus, true);
  add_gateway_options(rerank_cmd, rerank.gateway);
  rerank_cmd->add_option("--split", rerank.split, "Rerank the training lists of this split")
      ->check(CLI::ExistingFile);
  rerank_cmd->add_option("--method", rerank.method, "scs_emb | scs_llm | scs_instr | pcs_llm | pcs_instr")
      ->capture_default_str();
  auto* instr_opt = rerank_cmd->add_option("--instructions-file", rerank.instructions_file, "Relevance instructions")
                        ->check(CLI::ExistingFile);
  rerank_cmd->add_option("--review-store", rerank.review_store, "Take instructions from a review store")
      ->check(CLI::ExistingDirectory)
      ->excludes(instr_opt);
  rerank_cmd->add_option("--templates", rerank.templates, "Directory with single.txt / pairwise.txt")
      ->check(CLI::ExistingDirectory);
  rerank_cmd->add_option("--out", rerank.out, "Generated dataset")->capture_default_str();
  rerank_cmd->add_option("--results", rerank.results, "Also write full rerank results (JSONL)");
  rerank_cmd->add_option("--enqueue", rerank.enqueue, "Queue results for review in this store");
  rerank_cmd->add_option("--min-candidates", rerank.min_candidates, "Filter: smallest pool")->capture_default_str();
  rerank_cmd->add_option("--max-candidates", rerank.max_candidates, "Filter: largest pool")->capture_default_str();
  rerank_cmd->add_flag("--grade-diversity", rerank.grade_diversity, "Filter: need two distinct grades");
  rerank_cmd->add_option("--t", rerank.t, "Candidates kept per record")->capture_default_str();
  rerank_cmd->add_option("--seed", rerank.seed, "Recorded in the manifest")->capture_default_str();

  ServeArgs serve;
  auto* serve_cmd = app.add_subcommand("review-serve", "Serve the review API");
  serve_cmd->add_option("--store", serve.store, "Review store directory")
      ->envname("QBD_REVIEW_STORE")
      ->capture_default_str();
  serve_cmd->add_option("--host", serve.host, "Bind address")->capture_default_str();
  serve_cmd->add_option("--port", serve.port, "Port, 0 for any free port")->capture_default_str();
  serve_cmd->add_option("--static-dir", serve.static_dir, "Serve the review UI build from here")
      ->check(CLI::ExistingDirectory);
  serve_cmd->add_option("--results", serve.results, "Enqueue rerank results before serving")
      ->check(CLI::ExistingFile);

  TuneArgs tune;
  auto* tune_cmd = app.add_subcommand("tune", "Tune BM25 k1 and b against a training signal");
  add_corpus_options(tune_cmd, tune.corpus, false);
  tune_cmd->add_option("--split", tune.split, "Split file")->check(CLI::ExistingFile)->capture_default_str();
  tune_cmd->add_option("--signal", tune.signal, "ideal-train | ideal-test | generated dataset path")
      ->capture_default_str();
  tune_cmd->add_option("--rule", tune.rule, "grade>=N | positive | cutoff:X | top:K");
  tune_cmd->add_option("--scs-cutoff", tune.scs_cutoff, "Score cutoff for single-candidate signals")
      ->capture_default_str();
  tune_cmd->add_option("--index", tune.index, "Prebuilt index (default: build from the split)")
      ->check(CLI::ExistingFile);
  tune_cmd->add_option("--trials", tune.config.n_trials, "Trials including the default point")
      ->capture_default_str();
  tune_cmd->add_option("--seed", tune.config.seed, "Search seed")->capture_default_str();
  tune_cmd->add_flag("--grid", tune.grid, "Exhaustive grid instead of random search");
  tune_cmd->add_option("--out", tune.out, "Write the tune result JSON here");

  EvaluateArgs evaluate;
  auto* eval_cmd = app.add_subcommand("evaluate", "Score BM25 on the test lists of a split");
  add_corpus_options(eval_cmd, evaluate.corpus, false);
  eval_cmd->add_option("--split", evaluate.split, "Split file")->check(CLI::ExistingFile)->capture_default_str();
  eval_cmd->add_option("--params", evaluate.params, "Tune result JSON")->check(CLI::ExistingFile);
  eval_cmd->add_option("--k1", evaluate.k1, "Override k1");
  eval_cmd->add_option("--b", evaluate.b, "Override b");
  eval_cmd->add_option("--index", evaluate.index, "Prebuilt index (default: build from the split)")
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--threshold", evaluate.threshold, "Lowest relevant grade")->capture_default_str();
  eval_cmd->add_option("--cutoffs", evaluate.cutoffs, "Precision cutoffs")->capture_default_str();

  ExportArgs export_args;
  auto* export_cmd = app.add_subcommand("export", "Export reviewed rankings as a dataset");
  export_cmd->add_option("--store", export_args.store, "Review store directory")
      ->envname("QBD_REVIEW_STORE")
      ->capture_default_str();
  export_cmd->add_option("--out", export_args.out, "Dataset file")->capture_default_str();
  export_cmd->add_option("--status", export_args.statuses, "Statuses to include")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }
  if (common.verbose) spdlog::set_level(spdlog::level::debug);
  if (common.quiet) spdlog::set_level(spdlog::level::err);

  try {
    if (*ingest_cmd) run_ingest(common, ingest);
    if (*split_cmd) run_split(common, split);
    if (*rerank_cmd) run_rerank(common, rerank);
    if (*serve_cmd) run_serve(common, serve);
    if (*tune_cmd) run_tune(common, tune);
    if (*eval_cmd) run_evaluate(common, evaluate);
    if (*export_cmd) run_export(common, export_args);
  } catch (const qbd::GatewayError& e) {
    spdlog::error("{}", e.what());
    return kExitGateway;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitData;
  }
  return 0;
}
