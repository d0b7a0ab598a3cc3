#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "qbd/metrics.h"
#include "qbd/pipeline.h"
#include "qbd/rerank.h"

namespace qbd {

enum class ReviewStatus { pending, accepted, corrected, rejected };

std::string to_string(ReviewStatus status);
ReviewStatus review_status_from(const std::string& name);

struct ReviewItem {
  long id = 0;
  long revision = 0;
  ReviewStatus status = ReviewStatus::pending;
  std::string result_id;
  std::string query_id;
  std::string query_text;
  std::map<std::string, std::string> candidate_texts;
  RerankMethod method;
  Ranking proposed;
  std::vector<CandidateScore> scores;
  std::vector<PairVerdict> verdicts;  // raw LLM verdicts, never edited
  // Reviewer pair verdicts, (first, second) normalized so first < second.
  std::vector<PairVerdict> pair_overrides;
  std::optional<Ranking> corrected;
  std::optional<std::string> reject_reason;

  friend bool operator==(const ReviewItem&, const ReviewItem&) = default;
};

struct ReviewAction {
  enum class Kind { accept, reject, correct, correct_pair };
  Kind kind = Kind::accept;
  std::optional<std::string> reason;  // reject
  std::vector<std::string> order;     // correct: best first
  std::string first, second;          // correct_pair
  int verdict = 0;                    // correct_pair: +1 means first is better
};

nlohmann::json to_json(const ReviewAction& action);
ReviewAction review_action_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ReviewItem& item);
ReviewItem review_item_from_json(const nlohmann::json& j);

ReviewItem make_review_item(long id, const RerankResult& result);

// Pure transition used both live and during log replay. Bumps the revision
// by one. Throws DataError for an invalid permutation or unknown pair.
ReviewItem apply_action(const ReviewItem& item, const ReviewAction& action);

struct InstructionsDoc {
  std::string text;
  long version = 0;
  std::string updated_at;

  friend bool operator==(const InstructionsDoc&, const InstructionsDoc&) = default;
};

// Durable review queue. Every mutation is appended to events.log before it
// becomes visible; snapshot.json is rewritten every `snapshot_every` events
// and only shortens recovery. Mutations serialize on one mutex; reads
// work on an immutable state published after each mutation.
class ReviewStore {
 public:
  explicit ReviewStore(std::filesystem::path directory, std::size_t snapshot_every = 64);
  ~ReviewStore();
  ReviewStore(const ReviewStore&) = delete;
  ReviewStore& operator=(const ReviewStore&) = delete;

  // Idempotent per result id: re-enqueueing returns the existing item id.
  std::vector<long> enqueue(std::span<const RerankResult> results);
  ReviewItem apply_action(long item_id, long expected_revision, const ReviewAction& action);

  ReviewItem get(long item_id) const;
  std::vector<ReviewItem> list(std::optional<ReviewStatus> status = {}) const;
  InstructionsDoc instructions() const;
  InstructionsDoc put_instructions(std::string text, std::optional<long> expected_version = {});
  // Corrected items export their corrected ranking, accepted and pending
  // items the proposed one; rejected items never export.
  GeneratedDataset export_reviewed(const std::set<ReviewStatus>& statuses = {
                                       ReviewStatus::accepted, ReviewStatus::corrected}) const;

  long sequence() const;
  void write_snapshot();
  const std::filesystem::path& directory() const { return directory_; }

  // Item states rebuilt from the event log alone, ignoring any snapshot.
  static std::map<long, ReviewItem> replay_log(const std::filesystem::path& directory);

 private:
  struct State;

  std::shared_ptr<const State> current() const;
  void append(const nlohmann::json& event);
  void publish(std::shared_ptr<const State> next);
  void maybe_snapshot();

  std::filesystem::path directory_;
  std::size_t snapshot_every_;
  std::mutex write_mutex_;
  std::ofstream log_;
  std::shared_ptr<const State> state_;
  std::size_t since_snapshot_ = 0;
};

}  // namespace qbd
