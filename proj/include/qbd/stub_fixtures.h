#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "qbd/corpus.h"
#include "qbd/rerank.h"

namespace qbd {

struct GroundTruthStubOptions {
  double flip_fraction = 0.0;  // share of pairwise verdicts replaced by a wrong one
  std::uint64_t seed = 0;
};

// Writes StubBackend fixture lines answering every prompt that reranking
// `pools` with `method` will issue, derived from the judged grades: single
// scores are grade - 1, pair verdicts the sign of the grade difference.
// Returns the number of lines written.
std::size_t write_ground_truth_fixtures(std::ostream& out, const DocumentMap& documents,
                                        const std::vector<CandidatePool>& pools,
                                        const RerankMethod& method, const PromptTemplates& templates,
                                        const GroundTruthStubOptions& options = {});

}  // namespace qbd
