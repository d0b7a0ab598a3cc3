#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "qbd/corpus.h"
#include "qbd/metrics.h"

namespace qbd {

struct Bm25Params {
  double k1 = 1.5;
  double b = 0.75;

  friend bool operator==(const Bm25Params&, const Bm25Params&) = default;
};

inline constexpr Bm25Params kDefaultBm25Params{1.5, 0.75};

// Throws DataError unless k1 > 0 and 0 <= b <= 1.
void validate(const Bm25Params& params);

// Lowercased maximal runs of Unicode letters and digits. Invalid UTF-8
// bytes act as separators.
std::vector<std::string> tokenize(std::string_view text);

struct Posting {
  std::uint32_t doc = 0;  // index into Bm25Index::doc_ids()
  std::uint32_t tf = 0;

  friend bool operator==(const Posting&, const Posting&) = default;
};

class Bm25Index {
 public:
  static Bm25Index build(std::span<const Document> documents);
  static Bm25Index build(const std::vector<const Document*>& documents);

  std::size_t doc_count() const { return doc_ids_.size(); }
  double avg_doc_length() const { return avg_doc_length_; }
  const std::vector<std::string>& doc_ids() const { return doc_ids_; }
  const std::vector<std::uint32_t>& doc_lengths() const { return doc_lengths_; }
  bool contains(const std::string& doc_id) const { return doc_index_.contains(doc_id); }
  std::uint32_t doc_length(const std::string& doc_id) const;
  std::uint32_t doc_frequency(const std::string& term) const;
  std::uint32_t term_frequency(const std::string& term, const std::string& doc_id) const;
  // Non-negative IDF: ln(1 + (N - df + 0.5) / (df + 0.5)).
  double idf(const std::string& term) const;
  const std::vector<Posting>* postings(const std::string& term) const;
  std::size_t vocabulary_size() const { return terms_.size(); }

  // JSONL snapshot: a header line, one line per document, one per term
  // (terms in lexical order). Loading recomputes nothing but avgdl.
  void write(std::ostream& out) const;
  void save(const std::filesystem::path& path) const;
  static Bm25Index read(std::istream& in);
  static Bm25Index load(const std::filesystem::path& path);

  friend bool operator==(const Bm25Index& a, const Bm25Index& b) {
    return a.doc_ids_ == b.doc_ids_ && a.doc_lengths_ == b.doc_lengths_ && a.terms_ == b.terms_;
  }

 private:
  void finalize();

  std::vector<std::string> doc_ids_;
  std::vector<std::uint32_t> doc_lengths_;
  std::unordered_map<std::string, std::uint32_t> doc_index_;
  std::unordered_map<std::string, std::vector<Posting>> terms_;
  double avg_doc_length_ = 0.0;
};

double score(const Bm25Index& index, const Bm25Params& params, std::string_view query_text,
             const std::string& doc_id);

// Candidate statistics precomputed against one query so repeated ranking
// under different parameters costs only arithmetic. Candidates missing from
// the index get on-the-fly term frequencies and length; df, N and avgdl
// stay frozen at the index values.
class QueryPlan {
 public:
  QueryPlan(const Bm25Index& index, std::string query_id, std::string_view query_text,
            std::span<const Document> candidates);

  double score(std::size_t candidate, const Bm25Params& params) const;
  Ranking rank(const Bm25Params& params) const;
  std::size_t size() const { return candidate_ids_.size(); }
  std::size_t unindexed_count() const { return unindexed_; }

 private:
  struct QueryTerm {
    double idf;
    double count;  // occurrences in the query
  };
  std::string query_id_;
  double avg_doc_length_;
  std::vector<QueryTerm> terms_;
  std::vector<std::string> candidate_ids_;
  std::vector<double> lengths_;
  std::vector<std::vector<double>> tf_;  // [candidate][term]
  std::size_t unindexed_ = 0;
};

struct Bm25Ranking {
  Ranking ranking;
  std::size_t unindexed_count = 0;
};

Bm25Ranking rank_candidates(const Bm25Index& index, const Bm25Params& params,
                            const std::string& query_id, std::string_view query_text,
                            std::span<const Document> candidates);

}  // namespace qbd
