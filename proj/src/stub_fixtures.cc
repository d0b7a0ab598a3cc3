#include "qbd/stub_fixtures.h"

#include <ostream>

#include <json.hpp>

#include "qbd/error.h"
#include "qbd/hash.h"
#include "qbd/random.h"

namespace qbd {

using json = nlohmann::json;

namespace {

const Document& find_document(const DocumentMap& documents, const std::string& id) {
  auto it = documents.find(id);
  if (it == documents.end()) throw DataError("document '" + id + "' has no text");
  return it->second;
}

int sign(int v) { return (v > 0) - (v < 0); }

}  // namespace

std::size_t write_ground_truth_fixtures(std::ostream& out, const DocumentMap& documents,
                                        const std::vector<CandidatePool>& pools,
                                        const RerankMethod& method, const PromptTemplates& templates,
                                        const GroundTruthStubOptions& options) {
  if (options.flip_fraction < 0.0 || options.flip_fraction > 1.0) {
    throw DataError("flip fraction must lie in [0, 1]");
  }
  if (method.kind == RerankKind::scs_emb) throw DataError("embedding reranking needs no reply fixtures");
  Rng rng(options.seed);
  std::size_t lines = 0;
  auto emit = [&](const std::string& prompt, const json& reply) {
    out << json{{"prompt_sha256", sha256_hex(prompt)}, {"response", reply.dump()}}.dump() << '\n';
    ++lines;
  };
  for (const auto& pool : pools) {
    const auto& query = find_document(documents, pool.query_id).text;
    if (!method.pairwise()) {
      for (const auto& c : pool.candidates) {
        const auto prompt = templates.render_single(query, find_document(documents, c.doc_id).text,
                                                    method.instructions);
        emit(prompt, {{"score", c.grade - 1}, {"explanation", "grade " + std::to_string(c.grade)}});
      }
      continue;
    }
    for (const auto& a : pool.candidates) {
      for (const auto& b : pool.candidates) {
        if (a.doc_id == b.doc_id) continue;
        int verdict = sign(a.grade - b.grade);
        if (options.flip_fraction > 0.0 && rng.real(0.0, 1.0) < options.flip_fraction) {
          verdict = verdict != 0 ? -verdict : (rng.index(2) == 0 ? 1 : -1);
        }
        const auto prompt = templates.render_pair(query, find_document(documents, a.doc_id).text,
                                                  find_document(documents, b.doc_id).text,
                                                  method.instructions);
        emit(prompt, {{"verdict", verdict}});
      }
    }
  }
  return lines;
}

}  // namespace qbd
