#include "qbd/review_service.h"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <ctime>
#include <sstream>

#include "qbd/error.h"
#include "qbd/hash.h"

namespace qbd {

using json = nlohmann::json;

namespace {

constexpr char kLogFile[] = "events.log";
constexpr char kSnapshotFile[] = "snapshot.json";

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buffer[32];
  std::strftime(buffer, sizeof buffer, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buffer;
}

std::string action_kind_name(ReviewAction::Kind kind) {
  switch (kind) {
    case ReviewAction::Kind::accept:
      return "accept";
    case ReviewAction::Kind::reject:
      return "reject";
    case ReviewAction::Kind::correct:
      return "correct";
    case ReviewAction::Kind::correct_pair:
      return "correct_pair";
  }
  return "accept";
}

Ranking ranking_from_order(const std::string& query_id, const std::vector<std::string>& order) {
  Ranking r{query_id, {}};
  const auto n = static_cast<double>(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    r.entries.push_back({order[i], n - static_cast<double>(i), static_cast<int>(i) + 1});
  }
  return r;
}

}  // namespace

std::string to_string(ReviewStatus status) {
  switch (status) {
    case ReviewStatus::pending:
      return "pending";
    case ReviewStatus::accepted:
      return "accepted";
    case ReviewStatus::corrected:
      return "corrected";
    case ReviewStatus::rejected:
      return "rejected";
  }
  return "pending";
}

ReviewStatus review_status_from(const std::string& name) {
  if (name == "pending") return ReviewStatus::pending;
  if (name == "accepted") return ReviewStatus::accepted;
  if (name == "corrected") return ReviewStatus::corrected;
  if (name == "rejected") return ReviewStatus::rejected;
  throw DataError("unknown review status '" + name + "'");
}

json to_json(const ReviewAction& a) {
  json j = {{"kind", action_kind_name(a.kind)}};
  switch (a.kind) {
    case ReviewAction::Kind::accept:
      break;
    case ReviewAction::Kind::reject:
      if (a.reason) j["reason"] = *a.reason;
      break;
    case ReviewAction::Kind::correct:
      j["order"] = a.order;
      break;
    case ReviewAction::Kind::correct_pair:
      j["first"] = a.first;
      j["second"] = a.second;
      j["verdict"] = a.verdict;
      break;
  }
  return j;
}

ReviewAction review_action_from_json(const json& j) {
  ReviewAction a;
  try {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "accept") {
      a.kind = ReviewAction::Kind::accept;
    } else if (kind == "reject") {
      a.kind = ReviewAction::Kind::reject;
      if (j.contains("reason") && !j["reason"].is_null()) a.reason = j["reason"].get<std::string>();
    } else if (kind == "correct") {
      a.kind = ReviewAction::Kind::correct;
      a.order = j.at("order").get<std::vector<std::string>>();
    } else if (kind == "correct_pair") {
      a.kind = ReviewAction::Kind::correct_pair;
      a.first = j.at("first").get<std::string>();
      a.second = j.at("second").get<std::string>();
      a.verdict = j.at("verdict").get<int>();
    } else {
      throw DataError("unknown action kind '" + kind + "'");
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed action: ") + e.what());
  }
  return a;
}

json to_json(const ReviewItem& item) {
  json scores = json::array();
  for (const auto& s : item.scores) {
    json e = {{"doc_id", s.doc_id}, {"score", s.score}};
    e["explanation"] = s.explanation ? json(*s.explanation) : json(nullptr);
    scores.push_back(std::move(e));
  }
  json verdicts = json::array();
  for (const auto& v : item.verdicts) verdicts.push_back(to_json(v));
  json overrides = json::array();
  for (const auto& v : item.pair_overrides) overrides.push_back(to_json(v));
  json j = {{"id", item.id},
            {"revision", item.revision},
            {"status", to_string(item.status)},
            {"result_id", item.result_id},
            {"query_id", item.query_id},
            {"query_text", item.query_text},
            {"candidate_texts", item.candidate_texts},
            {"method", to_json(item.method)},
            {"proposed", to_json(item.proposed)},
            {"scores", scores},
            {"verdicts", verdicts},
            {"pair_overrides", overrides}};
  j["corrected"] = item.corrected ? to_json(*item.corrected) : json(nullptr);
  j["reject_reason"] = item.reject_reason ? json(*item.reject_reason) : json(nullptr);
  return j;
}

ReviewItem review_item_from_json(const json& j) {
  ReviewItem item;
  item.id = j.at("id").get<long>();
  item.revision = j.at("revision").get<long>();
  item.status = review_status_from(j.at("status").get<std::string>());
  item.result_id = j.at("result_id").get<std::string>();
  item.query_id = j.at("query_id").get<std::string>();
  item.query_text = j.at("query_text").get<std::string>();
  item.candidate_texts = j.at("candidate_texts").get<std::map<std::string, std::string>>();
  item.method = method_from_json(j.at("method"));
  item.proposed = ranking_from_json(j.at("proposed"));
  for (const auto& s : j.at("scores")) {
    CandidateScore c{s.at("doc_id").get<std::string>(), s.at("score").get<double>(), std::nullopt};
    if (!s.at("explanation").is_null()) c.explanation = s["explanation"].get<std::string>();
    item.scores.push_back(std::move(c));
  }
  for (const auto& v : j.at("verdicts")) item.verdicts.push_back(verdict_from_json(v));
  for (const auto& v : j.at("pair_overrides")) item.pair_overrides.push_back(verdict_from_json(v));
  if (!j.at("corrected").is_null()) item.corrected = ranking_from_json(j["corrected"]);
  if (!j.at("reject_reason").is_null()) item.reject_reason = j["reject_reason"].get<std::string>();
  return item;
}

ReviewItem make_review_item(long id, const RerankResult& result) {
  ReviewItem item;
  item.id = id;
  item.result_id = result.id;
  item.query_id = result.query_id;
  item.query_text = result.query_text;
  item.candidate_texts = result.candidate_texts;
  item.method = result.method;
  item.proposed = result.ranking;
  item.scores = result.scores;
  item.verdicts = result.verdicts;
  return item;
}

ReviewItem apply_action(const ReviewItem& item, const ReviewAction& action) {
  ReviewItem next = item;
  ++next.revision;
  switch (action.kind) {
    case ReviewAction::Kind::accept:
      next.status = ReviewStatus::accepted;
      next.corrected.reset();
      next.pair_overrides.clear();
      next.reject_reason.reset();
      break;
    case ReviewAction::Kind::reject:
      next.status = ReviewStatus::rejected;
      next.corrected.reset();
      next.pair_overrides.clear();
      next.reject_reason = action.reason;
      break;
    case ReviewAction::Kind::correct: {
      auto expected = item.proposed.doc_ids();
      auto given = action.order;
      std::sort(expected.begin(), expected.end());
      std::sort(given.begin(), given.end());
      if (expected != given) {
        throw DataError("item " + std::to_string(item.id) +
                        ": corrected order is not a permutation of the proposed candidates");
      }
      next.status = ReviewStatus::corrected;
      next.corrected = ranking_from_order(item.query_id, action.order);
      next.pair_overrides.clear();
      next.reject_reason.reset();
      break;
    }
    case ReviewAction::Kind::correct_pair: {
      if (action.verdict < -1 || action.verdict > 1) throw DataError("pair verdict outside {-1, 0, 1}");
      if (action.first == action.second) throw DataError("pair needs two distinct candidates");
      const bool known = std::any_of(item.verdicts.begin(), item.verdicts.end(), [&](const auto& v) {
        return (v.doc_first == action.first && v.doc_second == action.second) ||
               (v.doc_first == action.second && v.doc_second == action.first);
      });
      if (!known) {
        throw DataError("item " + std::to_string(item.id) + ": unknown pair (" + action.first + ", " +
                        action.second + ")");
      }
      PairVerdict human{action.first, action.second, action.verdict, std::nullopt, false};
      if (human.doc_second < human.doc_first) {
        std::swap(human.doc_first, human.doc_second);
        human.verdict = -human.verdict;
      }
      auto existing = std::find_if(next.pair_overrides.begin(), next.pair_overrides.end(), [&](const auto& o) {
        return o.doc_first == human.doc_first && o.doc_second == human.doc_second;
      });
      if (existing != next.pair_overrides.end()) {
        *existing = human;
      } else {
        next.pair_overrides.push_back(human);
      }
      // The human verdict replaces both orderings of the pair.
      std::vector<PairVerdict> effective = item.verdicts;
      for (auto& v : effective) {
        for (const auto& o : next.pair_overrides) {
          if (v.doc_first == o.doc_first && v.doc_second == o.doc_second) v.verdict = o.verdict;
          if (v.doc_first == o.doc_second && v.doc_second == o.doc_first) v.verdict = -o.verdict;
        }
      }
      const auto ids = item.proposed.doc_ids();
      const auto totals = aggregate_pair_verdicts(effective, ids);
      std::vector<std::pair<std::string, double>> scored;
      for (const auto& [id, total] : totals) scored.emplace_back(id, static_cast<double>(total));
      next.status = ReviewStatus::corrected;
      next.corrected = make_ranking(item.query_id, std::move(scored));
      next.reject_reason.reset();
      break;
    }
  }
  return next;
}

// ---------------------------------------------------------------------------

struct ReviewStore::State {
  long sequence = 0;
  long next_id = 1;
  std::map<long, std::shared_ptr<const ReviewItem>> items;
  std::map<std::string, long> by_result;
  InstructionsDoc instructions;

  // Applies one logged event. Used for live mutations and replay alike.
  void apply(const json& event) {
    const auto seq = event.at("seq").get<long>();
    if (seq != sequence + 1) {
      throw Error("review log out of order: expected event " + std::to_string(sequence + 1) +
                  ", found " + std::to_string(seq));
    }
    const auto type = event.at("type").get<std::string>();
    if (type == "enqueue") {
      auto item = std::make_shared<ReviewItem>(review_item_from_json(event.at("item")));
      by_result[item->result_id] = item->id;
      next_id = std::max(next_id, item->id + 1);
      items[item->id] = std::move(item);
    } else if (type == "action") {
      const auto id = event.at("item_id").get<long>();
      auto it = items.find(id);
      if (it == items.end()) throw Error("review log references unknown item " + std::to_string(id));
      if (it->second->revision != event.at("expected_revision").get<long>()) {
        throw Error("review log revision mismatch for item " + std::to_string(id));
      }
      it->second = std::make_shared<ReviewItem>(
          qbd::apply_action(*it->second, review_action_from_json(event.at("action"))));
    } else if (type == "instructions") {
      instructions = {event.at("text").get<std::string>(), event.at("version").get<long>(),
                      event.at("updated_at").get<std::string>()};
    } else {
      throw Error("unknown review event type '" + type + "'");
    }
    sequence = seq;
  }

  json to_snapshot() const {
    json items_json = json::array();
    for (const auto& [id, item] : items) items_json.push_back(to_json(*item));
    return {{"sequence", sequence},
            {"next_id", next_id},
            {"items", items_json},
            {"instructions",
             {{"text", instructions.text},
              {"version", instructions.version},
              {"updated_at", instructions.updated_at}}}};
  }

  static State from_snapshot(const json& j) {
    State s;
    s.sequence = j.at("sequence").get<long>();
    s.next_id = j.at("next_id").get<long>();
    for (const auto& item_json : j.at("items")) {
      auto item = std::make_shared<ReviewItem>(review_item_from_json(item_json));
      s.by_result[item->result_id] = item->id;
      s.items[item->id] = std::move(item);
    }
    const auto& ins = j.at("instructions");
    s.instructions = {ins.at("text").get<std::string>(), ins.at("version").get<long>(),
                      ins.at("updated_at").get<std::string>()};
    return s;
  }
};

namespace {

template <typename Fn>
void for_each_event(const std::filesystem::path& log_path, Fn&& fn) {
  std::ifstream in(log_path, std::ios::binary);
  if (!in) return;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      fn(json::parse(line));
    } catch (const json::exception& e) {
      throw Error(log_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

}  // namespace

ReviewStore::ReviewStore(std::filesystem::path directory, std::size_t snapshot_every)
    : directory_(std::move(directory)), snapshot_every_(std::max<std::size_t>(snapshot_every, 1)) {
  std::filesystem::create_directories(directory_);
  auto state = std::make_shared<State>();
  const auto snapshot_path = directory_ / kSnapshotFile;
  if (std::filesystem::exists(snapshot_path)) {
    std::ifstream in(snapshot_path, std::ios::binary);
    try {
      *state = State::from_snapshot(json::parse(in));
    } catch (const json::exception& e) {
      throw Error("corrupt review snapshot " + snapshot_path.string() + ": " + e.what());
    }
  }
  for_each_event(directory_ / kLogFile, [&](const json& event) {
    if (event.at("seq").get<long>() > state->sequence) state->apply(event);
  });
  state_ = std::move(state);
  log_.open(directory_ / kLogFile, std::ios::binary | std::ios::app);
  if (!log_) throw Error("storage failure: cannot open " + (directory_ / kLogFile).string());
}

ReviewStore::~ReviewStore() = default;

std::shared_ptr<const ReviewStore::State> ReviewStore::current() const {
  return std::atomic_load(&state_);
}

void ReviewStore::publish(std::shared_ptr<const State> next) { std::atomic_store(&state_, std::move(next)); }

void ReviewStore::append(const json& event) {
  log_ << event.dump() << '\n';
  log_.flush();
  if (!log_) throw Error("storage failure: cannot append to review log");
}

void ReviewStore::maybe_snapshot() {
  if (++since_snapshot_ >= snapshot_every_) {
    try {
      write_snapshot();
    } catch (const std::exception& e) {
      spdlog::warn("review snapshot failed: {}", e.what());
    }
  }
}

void ReviewStore::write_snapshot() {
  const auto state = current();
  const auto tmp = directory_ / (std::string(kSnapshotFile) + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << state->to_snapshot().dump();
    if (!out) throw Error("storage failure: cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, directory_ / kSnapshotFile);
  since_snapshot_ = 0;
}

std::vector<long> ReviewStore::enqueue(std::span<const RerankResult> results) {
  std::lock_guard lock(write_mutex_);
  std::vector<long> ids;
  if (results.empty()) return ids;
  auto next = std::make_shared<State>(*current());
  for (const auto& result : results) {
    if (result.id.empty()) throw DataError("rerank result without id");
    if (auto it = next->by_result.find(result.id); it != next->by_result.end()) {
      ids.push_back(it->second);
      continue;
    }
    const ReviewItem item = make_review_item(next->next_id, result);
    const json event = {{"seq", next->sequence + 1}, {"type", "enqueue"}, {"at", utc_now()}, {"item", to_json(item)}};
    append(event);
    next->apply(event);
    ids.push_back(item.id);
    maybe_snapshot();
  }
  publish(std::move(next));
  return ids;
}

ReviewItem ReviewStore::apply_action(long item_id, long expected_revision, const ReviewAction& action) {
  std::lock_guard lock(write_mutex_);
  const auto state = current();
  auto it = state->items.find(item_id);
  if (it == state->items.end()) throw NotFoundError("no review item " + std::to_string(item_id));
  const ReviewItem& item = *it->second;
  if (item.revision != expected_revision) {
    throw RevisionConflictError("item " + std::to_string(item_id) + " is at revision " +
                                    std::to_string(item.revision) + ", not " +
                                    std::to_string(expected_revision),
                                expected_revision, item.revision);
  }
  // Validate before logging so the log only holds applicable actions.
  ReviewItem updated = qbd::apply_action(item, action);
  const json event = {{"seq", state->sequence + 1},
                      {"type", "action"},
                      {"at", utc_now()},
                      {"item_id", item_id},
                      {"expected_revision", expected_revision},
                      {"action", to_json(action)}};
  append(event);
  auto next = std::make_shared<State>(*state);
  next->items[item_id] = std::make_shared<const ReviewItem>(updated);
  next->sequence += 1;
  publish(std::move(next));
  maybe_snapshot();
  return updated;
}

ReviewItem ReviewStore::get(long item_id) const {
  const auto state = current();
  auto it = state->items.find(item_id);
  if (it == state->items.end()) throw NotFoundError("no review item " + std::to_string(item_id));
  return *it->second;
}

std::vector<ReviewItem> ReviewStore::list(std::optional<ReviewStatus> status) const {
  const auto state = current();
  std::vector<ReviewItem> out;
  for (const auto& [id, item] : state->items) {
    if (!status || item->status == *status) out.push_back(*item);
  }
  return out;
}

InstructionsDoc ReviewStore::instructions() const { return current()->instructions; }

InstructionsDoc ReviewStore::put_instructions(std::string text, std::optional<long> expected_version) {
  std::lock_guard lock(write_mutex_);
  const auto state = current();
  if (expected_version && *expected_version != state->instructions.version) {
    throw RevisionConflictError("instructions are at version " + std::to_string(state->instructions.version),
                                *expected_version, state->instructions.version);
  }
  const json event = {{"seq", state->sequence + 1},
                      {"type", "instructions"},
                      {"text", std::move(text)},
                      {"version", state->instructions.version + 1},
                      {"updated_at", utc_now()}};
  append(event);
  auto next = std::make_shared<State>(*state);
  next->apply(event);
  const InstructionsDoc doc = next->instructions;
  publish(std::move(next));
  maybe_snapshot();
  return doc;
}

GeneratedDataset ReviewStore::export_reviewed(const std::set<ReviewStatus>& statuses) const {
  const auto state = current();
  GeneratedDataset dataset;
  std::set<std::string> methods;
  std::size_t largest = 1;
  std::ostringstream fingerprint;
  for (const auto& [id, item] : state->items) {
    if (!statuses.contains(item->status) || item->status == ReviewStatus::rejected) continue;
    const Ranking& ranking = item->status == ReviewStatus::corrected ? *item->corrected : item->proposed;
    DatasetRecord record;
    record.query_id = item->query_id;
    record.method = item->method.name();
    record.oracle_status = item->status == ReviewStatus::accepted    ? OracleStatus::accepted
                           : item->status == ReviewStatus::corrected ? OracleStatus::corrected
                                                                     : OracleStatus::unreviewed;
    record.pool_size = item->proposed.entries.size();
    record.result_id = item->result_id;
    for (const auto& e : ranking.entries) record.candidates.push_back({e.doc_id, e.score, e.rank, std::nullopt});
    largest = std::max(largest, record.pool_size);
    methods.insert(record.method);
    fingerprint << id << ':' << item->revision << ';';
    dataset.records.push_back(std::move(record));
  }
  if (dataset.records.empty()) throw DataError("nothing to export in the requested statuses");
  auto& manifest = dataset.manifest;
  manifest.method = methods.size() == 1 ? *methods.begin() : "mixed";
  manifest.instructions_version = state->instructions.version;
  manifest.config_hash = sha256_hex(fingerprint.str());
  manifest.filter = {1, largest, false};
  manifest.t = largest;
  return dataset;
}

long ReviewStore::sequence() const { return current()->sequence; }

std::map<long, ReviewItem> ReviewStore::replay_log(const std::filesystem::path& directory) {
  State state;
  for_each_event(directory / kLogFile, [&](const json& event) { state.apply(event); });
  std::map<long, ReviewItem> out;
  for (const auto& [id, item] : state.items) out.emplace(id, *item);
  return out;
}

}  // namespace qbd
