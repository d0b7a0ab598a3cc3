// Writes stub gateway fixtures that replay the judged grades, so the CLI can
// run the rerank stage without network access.

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <fstream>
#include <iostream>

#include "qbd/corpus.h"
#include "qbd/error.h"
#include "qbd/stub_fixtures.h"

int main(int argc, char** argv) {
  CLI::App app{"Generate ground-truth stub fixtures"};
  std::string documents = "fixtures/documents.jsonl";
  std::string judgments = "fixtures/qrels.txt";
  std::string split_path;
  std::string templates;
  std::string instructions_file;
  std::vector<std::string> methods{"scs_llm", "pcs_llm"};
  std::string out = "stub.jsonl";
  qbd::GroundTruthStubOptions options;
  app.add_option("--documents", documents)->check(CLI::ExistingFile)->capture_default_str();
  app.add_option("--judgments", judgments)->check(CLI::ExistingFile)->capture_default_str();
  app.add_option("--split", split_path, "Only cover the training lists of this split")->check(CLI::ExistingFile);
  app.add_option("--templates", templates, "Template directory")->check(CLI::ExistingDirectory);
  app.add_option("--instructions-file", instructions_file, "Also cover the _instr variants")
      ->check(CLI::ExistingFile);
  app.add_option("--method", methods, "Methods to cover")->capture_default_str();
  app.add_option("--flip", options.flip_fraction, "Share of pair verdicts to corrupt")->capture_default_str();
  app.add_option("--seed", options.seed, "Seed for corruption")->capture_default_str();
  app.add_option("--out", out)->capture_default_str();
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  try {
    const auto corpus = qbd::load_corpus(documents, judgments);
    std::vector<qbd::CandidatePool> pools;
    if (split_path.empty()) {
      pools = qbd::build_pools(corpus.judgments);
    } else {
      for (const auto& [query, candidates] : qbd::load_split(split_path).train_lists()) {
        pools.push_back({query, candidates});
      }
    }
    const auto prompt_templates = templates.empty() ? qbd::PromptTemplates::defaults()
                                                    : qbd::PromptTemplates::load(templates);
    std::optional<std::string> instructions;
    if (!instructions_file.empty()) {
      std::ifstream in(instructions_file, std::ios::binary);
      instructions.emplace(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    std::ofstream file(out, std::ios::binary | std::ios::trunc);
    if (!file) throw qbd::DataError("cannot write " + out);
    std::size_t lines = 0;
    for (const auto& name : methods) {
      const auto method = qbd::parse_method(name, name.ends_with("_instr") ? instructions : std::nullopt);
      lines += qbd::write_ground_truth_fixtures(file, corpus.documents, pools, method, prompt_templates, options);
    }
    std::cout << "wrote " << lines << " fixtures to " << out << '\n';
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 0;
}
