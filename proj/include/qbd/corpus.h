#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace qbd {

// A document of the corpus. In query-by-document retrieval the same type
// serves as both query and candidate.
struct Document {
  std::string id;
  std::string text;
  std::map<std::string, std::string> metadata;
};

using DocumentMap = std::map<std::string, Document>;

struct GradedJudgment {
  std::string query_id;
  std::string doc_id;
  int grade = 0;

  friend bool operator==(const GradedJudgment&, const GradedJudgment&) = default;
};

struct PoolCandidate {
  std::string doc_id;
  int grade = 0;

  friend bool operator==(const PoolCandidate&, const PoolCandidate&) = default;
};

struct CandidatePool {
  std::string query_id;
  std::vector<PoolCandidate> candidates;
};

struct TrainPair {
  std::string query_id;
  std::string doc_id;
  int grade = 0;

  friend bool operator==(const TrainPair&, const TrainPair&) = default;
};

struct SplitOptions {
  int per_grade_cap = 10;
  double pure_test_fraction = 0.20;
  int train_pair_budget = 100;
};

struct DatasetSplit {
  std::uint64_t seed = 0;
  SplitOptions options;
  std::vector<TrainPair> train_pairs;
  std::map<std::string, std::vector<PoolCandidate>> test_lists;
  std::set<std::string> pure_test_queries;
  // Test pairs dropped because their document also appears in training.
  std::size_t removed_for_disjointness = 0;

  std::set<std::string> train_queries() const;
  // Training pairs regrouped per query, in split order.
  std::map<std::string, std::vector<PoolCandidate>> train_lists() const;
};

// Accepted grade set. The cap and threshold logic never depends on it.
inline constexpr int kMinGrade = 0;
inline constexpr int kMaxGrade = 2;

// JSONL, one {"id", "text", "metadata"?} object per line.
DocumentMap load_documents(const std::filesystem::path& path);
DocumentMap parse_documents(std::istream& in, std::string_view source = "<stream>");

// Whitespace separated "query_id ignored doc_id grade" lines. Blank lines and
// lines starting with '#' are skipped.
std::vector<GradedJudgment> load_judgments(const std::filesystem::path& path);
std::vector<GradedJudgment> parse_judgments(std::istream& in,
                                            std::string_view source = "<stream>");

struct Corpus {
  DocumentMap documents;
  std::vector<GradedJudgment> judgments;
};

// Loads both files and checks that every judgment names loaded documents.
Corpus load_corpus(const std::filesystem::path& documents_path,
                   const std::filesystem::path& judgments_path);
void validate_judgments(const DocumentMap& documents,
                        const std::vector<GradedJudgment>& judgments);

// One pool per query, ordered by query id; candidates keep file order.
std::vector<CandidatePool> build_pools(const std::vector<GradedJudgment>& judgments);

DatasetSplit split_dataset(const std::vector<CandidatePool>& pools, std::uint64_t seed,
                           const SplitOptions& options = {});

void write_split(const DatasetSplit& split, std::ostream& out);
void save_split(const DatasetSplit& split, const std::filesystem::path& path);
DatasetSplit read_split(std::istream& in);
DatasetSplit load_split(const std::filesystem::path& path);

}  // namespace qbd
