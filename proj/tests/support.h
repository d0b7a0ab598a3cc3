#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "qbd/corpus.h"
#include "qbd/llm_gateway.h"
#include "qbd/metrics.h"

namespace qbd::testing {

class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

void write_file(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

struct SyntheticCorpus {
  DocumentMap documents;
  std::vector<GradedJudgment> judgments;
  std::vector<CandidatePool> pools() const;
};

// Generic topical corpus: each query has its own topic words; better grades
// share more of them with the query.
SyntheticCorpus topical_corpus(int queries, int candidates_per_query, std::uint64_t seed);

// Relevant candidates are short and mention the query topic once; the
// irrelevant ones are long padded documents that repeat it. Default BM25
// length normalization is too weak to demote the padded documents, b near
// 1 fixes most queries. `grades` gives the six candidates' grades in the
// order short, short, medium, medium, long, long.
SyntheticCorpus length_skew_corpus(int queries, const std::vector<int>& grades, int first_query = 0);

// Replies to the default prompts from judged grades: it finds the query and
// candidate texts in the prompt and answers score = grade - 1 or the sign
// of the grade difference.
StubBackend::Responder ground_truth_responder(const SyntheticCorpus& corpus);

// Independent reference implementations.
double brute_tau_b(const std::vector<double>& x, const std::vector<double>& y);
double brute_spearman(const std::vector<double>& x, const std::vector<double>& y);
double brute_average_precision(const std::vector<std::string>& ranked, const std::set<std::string>& relevant);

}  // namespace qbd::testing
