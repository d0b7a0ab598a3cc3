#include "qbd/llm_gateway.h"

#include <spdlog/spdlog.h>

#include <cmath>
#include <fstream>
#include <thread>

#include "qbd/error.h"
#include "qbd/hash.h"
#include "qbd/random.h"

namespace qbd {

using json = nlohmann::json;

std::size_t call_budget(RerankKind kind, std::size_t n_candidates) {
  if (n_candidates < 1) throw DataError("call_budget needs at least one candidate");
  switch (kind) {
    case RerankKind::scs_emb:
    case RerankKind::scs_llm:
      return n_candidates;
    case RerankKind::pcs_llm:
      return n_candidates * (n_candidates - 1);
  }
  return 0;
}

void validate(const GatewayConfig& config) {
  if (config.parallelism < 1) throw DataError("gateway: parallelism must be >= 1");
  if (!(config.temperature >= 0.0)) throw DataError("gateway: temperature must be >= 0");
  if (config.max_retries < 0) throw DataError("gateway: max_retries must be >= 0");
}

// ---------------------------------------------------------------------------
// Stub

StubBackend::StubBackend(std::size_t embedding_dim, std::uint64_t seed)
    : embedding_dim_(embedding_dim), seed_(seed) {
  if (embedding_dim_ == 0) throw DataError("stub: embedding dimension must be > 0");
}

std::unique_ptr<StubBackend> StubBackend::load(const std::filesystem::path& fixtures,
                                               std::size_t embedding_dim, std::uint64_t seed) {
  std::ifstream in(fixtures, std::ios::binary);
  if (!in) throw DataError("cannot open stub fixtures " + fixtures.string());
  auto stub = std::make_unique<StubBackend>(embedding_dim, seed);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json record = json::parse(line);
      if (record.contains("response")) {
        auto response = record.at("response").get<std::string>();
        if (record.contains("prompt_sha256")) {
          stub->add_response_for_hash(record["prompt_sha256"].get<std::string>(),
                                      std::move(response));
        } else {
          stub->add_response(record.at("prompt").get<std::string>(), std::move(response));
        }
      } else if (record.contains("embedding")) {
        auto vector = record.at("embedding").get<std::vector<double>>();
        if (record.contains("text_sha256")) {
          stub->embeddings_[record["text_sha256"].get<std::string>()] = std::move(vector);
        } else {
          stub->add_embedding(record.at("text").get<std::string>(), std::move(vector));
        }
      } else {
        throw DataError("record has neither response nor embedding");
      }
    } catch (const json::exception& e) {
      throw DataError(fixtures.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(fixtures.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return stub;
}

void StubBackend::add_response(const std::string& prompt, std::string response) {
  responses_[sha256_hex(prompt)] = std::move(response);
}

void StubBackend::add_response_for_hash(std::string prompt_sha256, std::string response) {
  responses_[std::move(prompt_sha256)] = std::move(response);
}

void StubBackend::add_embedding(const std::string& text, std::vector<double> vector) {
  embeddings_[sha256_hex(text)] = std::move(vector);
}

void StubBackend::set_responder(Responder responder) { responder_ = std::move(responder); }

Completion StubBackend::complete(const std::string& prompt) {
  completion_calls_.fetch_add(1);
  const auto hash = sha256_hex(prompt);
  if (auto it = responses_.find(hash); it != responses_.end()) return {it->second, {}, {}};
  if (responder_) return {responder_(prompt), {}, {}};
  throw GatewayError("stub has no response for prompt sha256 " + hash);
}

std::vector<double> StubBackend::embed(const std::string& text) {
  embedding_calls_.fetch_add(1);
  const auto hash = sha256_hex(text);
  if (auto it = embeddings_.find(hash); it != embeddings_.end()) return it->second;
  Rng rng(std::stoull(hash.substr(0, 16), nullptr, 16) ^ seed_);
  std::vector<double> vector(embedding_dim_);
  for (auto& v : vector) v = rng.real(-1.0, 1.0);
  return vector;
}

// ---------------------------------------------------------------------------
// Ledger

void CallLedger::tokens(Method m, std::uint64_t prompt, std::uint64_t completion) {
  slot(m).prompt_tokens.fetch_add(prompt, std::memory_order_relaxed);
  slot(m).completion_tokens.fetch_add(completion, std::memory_order_relaxed);
}

LedgerCounts CallLedger::read(const Slot& s) {
  return {s.requests.load(), s.retries.load(), s.failures.load(), s.prompt_tokens.load(),
          s.completion_tokens.load()};
}

LedgerSnapshot CallLedger::snapshot() const { return {read(complete_), read(embed_)}; }

json to_json(const LedgerSnapshot& snapshot) {
  auto counts = [](const LedgerCounts& c) {
    return json{{"requests", c.requests},
                {"retries", c.retries},
                {"failures", c.failures},
                {"prompt_tokens", c.prompt_tokens},
                {"completion_tokens", c.completion_tokens}};
  };
  return {{"complete", counts(snapshot.complete)}, {"embed", counts(snapshot.embed)}};
}

// ---------------------------------------------------------------------------
// Gateway

Gateway::Gateway(GatewayConfig config, std::unique_ptr<Backend> backend, Sleeper sleeper)
    : config_(std::move(config)),
      backend_(std::move(backend)),
      sleeper_(std::move(sleeper)),
      in_flight_(std::max(config_.parallelism, 1)),
      jitter_state_(0x9E3779B97F4A7C15ULL) {
  validate(config_);
  if (!backend_) throw DataError("gateway: no backend");
  if (!sleeper_) sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

std::chrono::milliseconds Gateway::backoff(int retry) {
  double unit;
  {
    std::lock_guard lock(jitter_mutex_);
    Rng rng(jitter_state_++);
    unit = rng.real(0.5, 1.0);
  }
  const double base = static_cast<double>(config_.backoff_base.count()) * std::ldexp(1.0, retry);
  return std::chrono::milliseconds(static_cast<std::int64_t>(base * unit));
}

template <typename Call>
auto Gateway::with_retries(CallLedger::Method method, Call&& call) {
  const int attempts = config_.max_retries + 1;
  for (int attempt = 1;; ++attempt) {
    ledger_.request(method);
    try {
      in_flight_.acquire();
      struct Release {
        std::counting_semaphore<>& s;
        ~Release() { s.release(); }
      } release{in_flight_};
      return call();
    } catch (const TransientError& e) {
      if (attempt >= attempts) {
        ledger_.failure(method);
        throw RetryExhaustedError(
            "gave up after " + std::to_string(attempt) + " attempts: " + e.what(),
            static_cast<std::size_t>(attempt));
      }
      ledger_.retry(method);
      const auto delay = backoff(attempt - 1);
      spdlog::debug("transient backend failure ({}), retry {} in {} ms", e.what(), attempt,
                    delay.count());
      sleeper_(delay);
    } catch (...) {
      ledger_.failure(method);
      throw;
    }
  }
}

std::string Gateway::complete(const std::string& prompt) {
  Completion c = with_retries(CallLedger::Method::complete, [&] { return backend_->complete(prompt); });
  ledger_.tokens(CallLedger::Method::complete,
                 static_cast<std::uint64_t>(c.prompt_tokens.value_or(0)),
                 static_cast<std::uint64_t>(c.completion_tokens.value_or(0)));
  return std::move(c.text);
}

std::vector<double> Gateway::embed(const std::string& text) {
  if (text.empty()) throw DataError("refusing to embed empty text");
  auto vector = with_retries(CallLedger::Method::embed, [&] { return backend_->embed(text); });
  if (vector.empty()) throw GatewayError("backend returned an empty embedding");
  std::size_t expected = 0;
  if (!embedding_dim_.compare_exchange_strong(expected, vector.size()) &&
      expected != vector.size()) {
    throw GatewayError("embedding dimension " + std::to_string(vector.size()) +
                       " differs from session dimension " + std::to_string(expected));
  }
  return vector;
}

}  // namespace qbd
