#include "qbd/bm25.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <locale>
#include <map>
#include <json.hpp>

#include "qbd/error.h"

namespace qbd {

using json = nlohmann::json;

namespace {

const std::ctype<wchar_t>& unicode_ctype() {
  static const std::locale locale = [] {
    for (const char* name : {"C.UTF-8", "C.utf8", "en_US.UTF-8"}) {
      try {
        return std::locale(name);
      } catch (const std::runtime_error&) {
      }
    }
    return std::locale::classic();
  }();
  return std::use_facet<std::ctype<wchar_t>>(locale);
}

// Decodes one code point starting at text[pos]; returns 0xFFFFFFFF on an
// invalid sequence. Advances pos past the consumed bytes.
char32_t next_code_point(std::string_view text, std::size_t& pos) {
  constexpr char32_t kInvalid = 0xFFFFFFFF;
  const auto lead = static_cast<unsigned char>(text[pos++]);
  if (lead < 0x80) return lead;
  int extra;
  char32_t cp;
  if ((lead & 0xE0) == 0xC0) {
    extra = 1, cp = lead & 0x1F;
  } else if ((lead & 0xF0) == 0xE0) {
    extra = 2, cp = lead & 0x0F;
  } else if ((lead & 0xF8) == 0xF0) {
    extra = 3, cp = lead & 0x07;
  } else {
    return kInvalid;
  }
  for (int i = 0; i < extra; ++i) {
    if (pos >= text.size()) return kInvalid;
    const auto byte = static_cast<unsigned char>(text[pos]);
    if ((byte & 0xC0) != 0x80) return kInvalid;
    cp = (cp << 6) | (byte & 0x3F);
    ++pos;
  }
  return cp;
}

void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

double term_weight(double tf, double length, double avg_length, const Bm25Params& p) {
  if (tf <= 0.0) return 0.0;
  const double norm = avg_length > 0.0 ? length / avg_length : 1.0;
  return tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * norm));
}

double idf_of(double doc_count, double df) {
  return std::log(1.0 + (doc_count - df + 0.5) / (df + 0.5));
}

std::map<std::string, std::uint32_t> count_terms(std::string_view text) {
  std::map<std::string, std::uint32_t> counts;
  for (auto& token : tokenize(text)) ++counts[std::move(token)];
  return counts;
}

}  // namespace

void validate(const Bm25Params& params) {
  if (!(params.k1 > 0.0)) throw DataError("bm25: k1 must be > 0");
  if (!(params.b >= 0.0 && params.b <= 1.0)) throw DataError("bm25: b must lie in [0, 1]");
}

std::vector<std::string> tokenize(std::string_view text) {
  const auto& ctype = unicode_ctype();
  std::vector<std::string> tokens;
  std::string current;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const char32_t cp = next_code_point(text, pos);
    const bool valid = cp <= 0x10FFFF && !(cp >= 0xD800 && cp <= 0xDFFF);
    const auto wide = static_cast<wchar_t>(cp);
    if (valid && ctype.is(std::ctype_base::alnum, wide)) {
      append_utf8(current, static_cast<char32_t>(ctype.tolower(wide)));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

Bm25Index Bm25Index::build(std::span<const Document> documents) {
  std::vector<const Document*> pointers;
  pointers.reserve(documents.size());
  for (const auto& doc : documents) pointers.push_back(&doc);
  return build(pointers);
}

Bm25Index Bm25Index::build(const std::vector<const Document*>& documents) {
  if (documents.empty()) throw DataError("bm25: cannot index an empty corpus");
  Bm25Index index;
  for (const Document* doc : documents) {
    if (index.doc_index_.contains(doc->id)) {
      throw DataError("bm25: duplicate document '" + doc->id + "'");
    }
    const auto doc_number = static_cast<std::uint32_t>(index.doc_ids_.size());
    index.doc_index_.emplace(doc->id, doc_number);
    index.doc_ids_.push_back(doc->id);
    std::uint32_t length = 0;
    for (const auto& [term, tf] : count_terms(doc->text)) {
      index.terms_[term].push_back({doc_number, tf});
      length += tf;
    }
    index.doc_lengths_.push_back(length);
  }
  index.finalize();
  return index;
}

void Bm25Index::finalize() {
  double total = 0.0;
  for (auto length : doc_lengths_) total += length;
  avg_doc_length_ = doc_lengths_.empty() ? 0.0 : total / static_cast<double>(doc_lengths_.size());
  doc_index_.clear();
  for (std::uint32_t i = 0; i < doc_ids_.size(); ++i) doc_index_.emplace(doc_ids_[i], i);
}

std::uint32_t Bm25Index::doc_length(const std::string& doc_id) const {
  auto it = doc_index_.find(doc_id);
  if (it == doc_index_.end()) throw DataError("bm25: unknown document '" + doc_id + "'");
  return doc_lengths_[it->second];
}

const std::vector<Posting>* Bm25Index::postings(const std::string& term) const {
  auto it = terms_.find(term);
  return it == terms_.end() ? nullptr : &it->second;
}

std::uint32_t Bm25Index::doc_frequency(const std::string& term) const {
  const auto* list = postings(term);
  return list ? static_cast<std::uint32_t>(list->size()) : 0;
}

std::uint32_t Bm25Index::term_frequency(const std::string& term, const std::string& doc_id) const {
  auto doc = doc_index_.find(doc_id);
  if (doc == doc_index_.end()) throw DataError("bm25: unknown document '" + doc_id + "'");
  const auto* list = postings(term);
  if (!list) return 0;
  auto it = std::lower_bound(list->begin(), list->end(), doc->second,
                             [](const Posting& p, std::uint32_t d) { return p.doc < d; });
  return it != list->end() && it->doc == doc->second ? it->tf : 0;
}

double Bm25Index::idf(const std::string& term) const {
  return idf_of(static_cast<double>(doc_count()), doc_frequency(term));
}

void Bm25Index::write(std::ostream& out) const {
  out << json{{"format", "qbd-bm25-index"},
              {"version", 1},
              {"doc_count", doc_count()},
              {"term_count", terms_.size()}}
             .dump()
      << '\n';
  for (std::size_t i = 0; i < doc_ids_.size(); ++i) {
    out << json{{"doc", doc_ids_[i]}, {"length", doc_lengths_[i]}}.dump() << '\n';
  }
  std::vector<const std::string*> sorted;
  for (const auto& [term, _] : terms_) sorted.push_back(&term);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return *a < *b; });
  for (const auto* term : sorted) {
    json list = json::array();
    for (const auto& p : terms_.at(*term)) list.push_back({p.doc, p.tf});
    out << json{{"term", *term}, {"postings", list}}.dump() << '\n';
  }
}

void Bm25Index::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  write(out);
}

Bm25Index Bm25Index::read(std::istream& in) {
  Bm25Index index;
  std::string line;
  std::size_t line_no = 0;
  try {
    if (!std::getline(in, line)) throw DataError("empty index file");
    ++line_no;
    const json header = json::parse(line);
    if (header.at("format") != "qbd-bm25-index" || header.at("version") != 1) {
      throw DataError("not a version 1 bm25 index snapshot");
    }
    const auto n_docs = header.at("doc_count").get<std::size_t>();
    const auto n_terms = header.at("term_count").get<std::size_t>();
    for (std::size_t i = 0; i < n_docs; ++i) {
      if (!std::getline(in, line)) throw DataError("truncated document section");
      ++line_no;
      const json doc = json::parse(line);
      index.doc_ids_.push_back(doc.at("doc").get<std::string>());
      index.doc_lengths_.push_back(doc.at("length").get<std::uint32_t>());
    }
    for (std::size_t i = 0; i < n_terms; ++i) {
      if (!std::getline(in, line)) throw DataError("truncated postings section");
      ++line_no;
      const json term = json::parse(line);
      auto& list = index.terms_[term.at("term").get<std::string>()];
      for (const auto& p : term.at("postings")) {
        const auto doc = p.at(0).get<std::uint32_t>();
        if (doc >= n_docs) throw DataError("posting references document " + std::to_string(doc));
        list.push_back({doc, p.at(1).get<std::uint32_t>()});
      }
    }
  } catch (const json::exception& e) {
    throw DataError("index line " + std::to_string(line_no) + ": " + e.what());
  }
  if (index.doc_ids_.empty()) throw DataError("index snapshot holds no documents");
  index.finalize();
  return index;
}

Bm25Index Bm25Index::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return read(in);
}

double score(const Bm25Index& index, const Bm25Params& params, std::string_view query_text,
             const std::string& doc_id) {
  validate(params);
  const double length = index.doc_length(doc_id);
  double total = 0.0;
  for (const auto& [term, count] : count_terms(query_text)) {
    const double tf = index.term_frequency(term, doc_id);
    total += count * index.idf(term) * term_weight(tf, length, index.avg_doc_length(), params);
  }
  return total;
}

QueryPlan::QueryPlan(const Bm25Index& index, std::string query_id, std::string_view query_text,
                     std::span<const Document> candidates)
    : query_id_(std::move(query_id)), avg_doc_length_(index.avg_doc_length()) {
  const auto query_terms = count_terms(query_text);
  std::vector<const std::string*> term_names;
  for (const auto& [term, count] : query_terms) {
    terms_.push_back({index.idf(term), static_cast<double>(count)});
    term_names.push_back(&term);
  }
  for (const auto& doc : candidates) {
    candidate_ids_.push_back(doc.id);
    std::vector<double> tf(terms_.size(), 0.0);
    if (index.contains(doc.id)) {
      lengths_.push_back(index.doc_length(doc.id));
      for (std::size_t t = 0; t < term_names.size(); ++t) {
        tf[t] = index.term_frequency(*term_names[t], doc.id);
      }
    } else {
      ++unindexed_;
      const auto counts = count_terms(doc.text);
      double length = 0.0;
      for (const auto& [_, c] : counts) length += c;
      lengths_.push_back(length);
      for (std::size_t t = 0; t < term_names.size(); ++t) {
        auto it = counts.find(*term_names[t]);
        if (it != counts.end()) tf[t] = it->second;
      }
    }
    tf_.push_back(std::move(tf));
  }
}

double QueryPlan::score(std::size_t candidate, const Bm25Params& params) const {
  double total = 0.0;
  const auto& tf = tf_.at(candidate);
  for (std::size_t t = 0; t < terms_.size(); ++t) {
    total += terms_[t].count * terms_[t].idf *
             term_weight(tf[t], lengths_[candidate], avg_doc_length_, params);
  }
  return total;
}

Ranking QueryPlan::rank(const Bm25Params& params) const {
  validate(params);
  if (candidate_ids_.empty()) throw DataError("bm25: empty candidate list for " + query_id_);
  std::vector<std::pair<std::string, double>> scored;
  scored.reserve(candidate_ids_.size());
  for (std::size_t i = 0; i < candidate_ids_.size(); ++i) {
    scored.emplace_back(candidate_ids_[i], score(i, params));
  }
  return make_ranking(query_id_, std::move(scored));
}

Bm25Ranking rank_candidates(const Bm25Index& index, const Bm25Params& params,
                            const std::string& query_id, std::string_view query_text,
                            std::span<const Document> candidates) {
  QueryPlan plan(index, query_id, query_text, candidates);
  return {plan.rank(params), plan.unindexed_count()};
}

}  // namespace qbd
