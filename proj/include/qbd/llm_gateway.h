#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace qbd {

// Reranking method families. The instruction-carrying variants (scs_instr,
// pcs_instr) share the kind of their base method.
enum class RerankKind { scs_emb, scs_llm, pcs_llm };

// Backend calls needed to rerank n candidates: n for single-candidate
// scoring, n(n-1) ordered pairs for pairwise scoring.
std::size_t call_budget(RerankKind kind, std::size_t n_candidates);

struct GatewayConfig {
  std::string base_url = "https://api.openai.com/v1";
  std::string model;
  std::string embedding_model;
  // Name of the environment variable holding the API key. Keys never live
  // in config files.
  std::string api_key_env = "QBD_LLM_API_KEY";
  double temperature = 0.0;
  int max_retries = 3;
  int parallelism = 4;
  std::chrono::milliseconds timeout{60000};
  std::chrono::milliseconds backoff_base{500};
};

void validate(const GatewayConfig& config);

struct Completion {
  std::string text;
  std::optional<std::int64_t> prompt_tokens;
  std::optional<std::int64_t> completion_tokens;
};

// A source of completions and embeddings. Implementations signal retryable
// failures with TransientError; the Gateway owns retries and accounting.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual Completion complete(const std::string& prompt) = 0;
  virtual std::vector<double> embed(const std::string& text) = 0;
};

struct HttpResponse {
  int status = 0;
  std::string body;
};

using HttpHeaders = std::vector<std::pair<std::string, std::string>>;

// POSTs JSON bodies relative to a base URL. Throws TimeoutError or
// TransientError when no response arrives.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpResponse post(const std::string& path, const std::string& body,
                            const HttpHeaders& headers) = 0;
};

std::unique_ptr<Transport> make_http_transport(const std::string& base_url,
                                               std::chrono::milliseconds timeout);

// OpenAI-compatible wire shapes: POST {base}/chat/completions and
// POST {base}/embeddings with a bearer token.
class OpenAiBackend : public Backend {
 public:
  OpenAiBackend(GatewayConfig config, std::unique_ptr<Transport> transport, std::string api_key);

  // Reads the key from config.api_key_env; AuthenticationError if unset.
  static std::unique_ptr<OpenAiBackend> from_environment(const GatewayConfig& config);

  Completion complete(const std::string& prompt) override;
  std::vector<double> embed(const std::string& text) override;

 private:
  nlohmann::json post_json(const std::string& path, const nlohmann::json& body);

  GatewayConfig config_;
  std::unique_ptr<Transport> transport_;
  std::string api_key_;
};

// Offline backend. Completions come from fixtures keyed by the SHA-256 of
// the prompt, then from an optional responder; embeddings from fixtures,
// otherwise a seeded vector derived from the text hash.
class StubBackend : public Backend {
 public:
  using Responder = std::function<std::string(const std::string& prompt)>;

  explicit StubBackend(std::size_t embedding_dim = 64, std::uint64_t seed = 0);

  // Fixture lines: {"prompt_sha256"|"prompt", "response"} or
  // {"text_sha256"|"text", "embedding": [...]}.
  static std::unique_ptr<StubBackend> load(const std::filesystem::path& fixtures,
                                           std::size_t embedding_dim = 64,
                                           std::uint64_t seed = 0);

  void add_response(const std::string& prompt, std::string response);
  void add_response_for_hash(std::string prompt_sha256, std::string response);
  void add_embedding(const std::string& text, std::vector<double> vector);
  void set_responder(Responder responder);

  Completion complete(const std::string& prompt) override;
  std::vector<double> embed(const std::string& text) override;

  std::size_t completion_calls() const { return completion_calls_.load(); }
  std::size_t embedding_calls() const { return embedding_calls_.load(); }

 private:
  std::size_t embedding_dim_;
  std::uint64_t seed_;
  std::map<std::string, std::string> responses_;
  std::map<std::string, std::vector<double>> embeddings_;
  Responder responder_;
  std::atomic<std::size_t> completion_calls_{0};
  std::atomic<std::size_t> embedding_calls_{0};
};

struct LedgerCounts {
  std::uint64_t requests = 0;
  std::uint64_t retries = 0;
  std::uint64_t failures = 0;
  std::uint64_t prompt_tokens = 0;
  std::uint64_t completion_tokens = 0;

  friend bool operator==(const LedgerCounts&, const LedgerCounts&) = default;
};

struct LedgerSnapshot {
  LedgerCounts complete;
  LedgerCounts embed;
};

nlohmann::json to_json(const LedgerSnapshot& snapshot);

// Monotone per-method counters, safe to bump from any thread.
class CallLedger {
 public:
  enum class Method { complete, embed };

  void request(Method m) { slot(m).requests.fetch_add(1, std::memory_order_relaxed); }
  void retry(Method m) { slot(m).retries.fetch_add(1, std::memory_order_relaxed); }
  void failure(Method m) { slot(m).failures.fetch_add(1, std::memory_order_relaxed); }
  void tokens(Method m, std::uint64_t prompt, std::uint64_t completion);
  LedgerSnapshot snapshot() const;

 private:
  struct Slot {
    std::atomic<std::uint64_t> requests{0};
    std::atomic<std::uint64_t> retries{0};
    std::atomic<std::uint64_t> failures{0};
    std::atomic<std::uint64_t> prompt_tokens{0};
    std::atomic<std::uint64_t> completion_tokens{0};
  };
  Slot& slot(Method m) { return m == Method::complete ? complete_ : embed_; }
  static LedgerCounts read(const Slot& s);

  Slot complete_;
  Slot embed_;
};

// Thread-safe front door to a Backend: bounded in-flight requests,
// exponential backoff with jitter on transient failures, call accounting.
class Gateway {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  Gateway(GatewayConfig config, std::unique_ptr<Backend> backend, Sleeper sleeper = {});

  std::string complete(const std::string& prompt);
  // Rejects empty text and vectors whose dimension differs from the first
  // embedding returned in this session.
  std::vector<double> embed(const std::string& text);

  LedgerSnapshot ledger() const { return ledger_.snapshot(); }
  const GatewayConfig& config() const { return config_; }
  int parallelism() const { return config_.parallelism; }

 private:
  template <typename Call>
  auto with_retries(CallLedger::Method method, Call&& call);
  std::chrono::milliseconds backoff(int retry);

  GatewayConfig config_;
  std::unique_ptr<Backend> backend_;
  Sleeper sleeper_;
  CallLedger ledger_;
  std::counting_semaphore<> in_flight_;
  std::mutex jitter_mutex_;
  std::uint64_t jitter_state_;
  std::atomic<std::size_t> embedding_dim_{0};
};

}  // namespace qbd
