#include "support.h"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

namespace qbd::testing {

TempDir::TempDir() {
  static std::mt19937_64 rng(std::random_device{}());
  path_ = std::filesystem::temp_directory_path() / ("qbd-test-" + std::to_string(rng()));
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ignored;
  std::filesystem::remove_all(path_, ignored);
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

std::vector<CandidatePool> SyntheticCorpus::pools() const { return build_pools(judgments); }

namespace {

std::string query_id(int q) {
  char buffer[16];
  std::snprintf(buffer, sizeof buffer, "q%03d", q);
  return buffer;
}

std::string doc_id(int q, int c) {
  char buffer[24];
  std::snprintf(buffer, sizeof buffer, "q%03d-d%02d", q, c);
  return buffer;
}

std::string words(const std::string& stem, int count, int offset = 0) {
  std::string out;
  for (int i = 0; i < count; ++i) {
    if (!out.empty()) out += ' ';
    out += stem + std::to_string(offset + i);
  }
  return out;
}

std::string repeat(const std::string& word, int count) {
  std::string out;
  for (int i = 0; i < count; ++i) {
    if (!out.empty()) out += ' ';
    out += word;
  }
  return out;
}

}  // namespace

SyntheticCorpus topical_corpus(int queries, int candidates_per_query, std::uint64_t seed) {
  SyntheticCorpus corpus;
  std::mt19937_64 rng(seed);
  for (int q = 0; q < queries; ++q) {
    const std::string topic = "topic" + std::to_string(q) + "w";
    const std::string qid = query_id(q);
    corpus.documents[qid] = {qid, "query about " + words(topic, 6), {}};
    for (int c = 0; c < candidates_per_query; ++c) {
      const int grade = static_cast<int>(rng() % 3);
      const int shared = grade * 2 + static_cast<int>(rng() % 2);
      const std::string id = doc_id(q, c);
      corpus.documents[id] = {id, words(topic, shared) + " " +
                                      words("noise" + std::to_string(q) + "c" + std::to_string(c) + "n", 5 + static_cast<int>(rng() % 8)), {}};
      corpus.judgments.push_back({qid, id, grade});
    }
  }
  return corpus;
}

SyntheticCorpus length_skew_corpus(int queries, const std::vector<int>& grades, int first_query) {
  SyntheticCorpus corpus;
  for (int q = first_query; q < first_query + queries; ++q) {
    const std::string topic = "topic" + std::to_string(q);
    const std::string qid = query_id(q);
    corpus.documents[qid] = {qid, topic + " query" + std::to_string(q), {}};
    const int m = 3 + q % 5;
    const int padded = 20 + 4 * (q % 7);
    // (topic occurrences, total length)
    const std::vector<std::pair<int, int>> shapes = {{1, 4}, {1, 5}, {2, 10}, {2, 11}, {m, padded}, {m + 1, padded + 6}};
    for (int c = 0; c < 6; ++c) {
      const auto [tf, length] = shapes[c];
      const std::string id = doc_id(q, c);
      const std::string filler = words("f" + std::to_string(q) + "x" + std::to_string(c) + "y", length - tf);
      corpus.documents[id] = {id, repeat(topic, tf) + " " + filler, {}};
      corpus.judgments.push_back({qid, id, grades.at(c)});
    }
  }
  return corpus;
}

StubBackend::Responder ground_truth_responder(const SyntheticCorpus& corpus) {
  // (query text, candidate text) -> grade
  auto grades = std::make_shared<std::map<std::pair<std::string, std::string>, int>>();
  for (const auto& j : corpus.judgments) {
    (*grades)[{corpus.documents.at(j.query_id).text, corpus.documents.at(j.doc_id).text}] = j.grade;
  }
  auto between = [](const std::string& text, const std::string& open, const std::string& close) {
    const auto start = text.find(open);
    if (start == std::string::npos) return std::string();
    const auto from = start + open.size();
    return text.substr(from, text.find(close, from) - from);
  };
  return [grades, between](const std::string& prompt) -> std::string {
    const std::string query = between(prompt, "Query document:\n", "\n\n");
    if (prompt.find("Candidate document:\n") != std::string::npos) {
      const std::string candidate = between(prompt, "Candidate document:\n", "\n\n");
      const int grade = grades->at({query, candidate});
      return nlohmann::json{{"score", grade - 1}, {"explanation", "grade " + std::to_string(grade)}}.dump();
    }
    const std::string a = between(prompt, "Candidate 1:\n", "\n\n");
    const std::string b = between(prompt, "Candidate 2:\n", "\n\n");
    const int diff = grades->at({query, a}) - grades->at({query, b});
    return nlohmann::json{{"verdict", (diff > 0) - (diff < 0)}, {"explanation", "by grade"}}.dump();
  };
}

double brute_tau_b(const std::vector<double>& x, const std::vector<double>& y) {
  double c = 0, d = 0, t1 = 0, t2 = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      const double dx = x[i] - x[j];
      const double dy = y[i] - y[j];
      if (dx == 0 && dy == 0) continue;
      if (dx == 0) {
        t1 += 1;
      } else if (dy == 0) {
        t2 += 1;
      } else if (dx * dy > 0) {
        c += 1;
      } else {
        d += 1;
      }
    }
  }
  return (c - d) / std::sqrt((c + d + t1) * (c + d + t2));
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    double below = 0, equal = 0;
    for (std::size_t j = 0; j < v.size(); ++j) {
      if (v[j] < v[i]) below += 1;
      if (j != i && v[j] == v[i]) equal += 1;
    }
    out.push_back(1 + below + equal / 2);
  }
  return out;
}

}  // namespace

double brute_spearman(const std::vector<double>& x, const std::vector<double>& y) {
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += rx[i] / n, my += ry[i] / n;
  double num = 0, sx = 0, sy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    num += (rx[i] - mx) * (ry[i] - my);
    sx += (rx[i] - mx) * (rx[i] - mx);
    sy += (ry[i] - my) * (ry[i] - my);
  }
  return num / (std::sqrt(sx) * std::sqrt(sy));
}

double brute_average_precision(const std::vector<std::string>& ranked, const std::set<std::string>& relevant) {
  double sum = 0;
  for (std::size_t k = 1; k <= ranked.size(); ++k) {
    if (!relevant.contains(ranked[k - 1])) continue;
    double hits = 0;
    for (std::size_t i = 0; i < k; ++i) hits += relevant.contains(ranked[i]) ? 1 : 0;
    sum += hits / static_cast<double>(k);
  }
  return sum / static_cast<double>(relevant.size());
}

}  // namespace qbd::testing
