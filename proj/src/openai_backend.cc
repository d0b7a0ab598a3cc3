#include <httplib.h>

#include <cstdlib>

#include "qbd/error.h"
#include "qbd/llm_gateway.h"

namespace qbd {

using json = nlohmann::json;

namespace {

struct BaseUrl {
  std::string origin;  // scheme://host[:port]
  std::string prefix;  // path without trailing slash
};

BaseUrl split_base_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw DataError("base url needs a scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  BaseUrl out;
  out.origin = url.substr(0, path_start);
  if (path_start != std::string::npos) out.prefix = url.substr(path_start);
  while (!out.prefix.empty() && out.prefix.back() == '/') out.prefix.pop_back();
  return out;
}

class HttplibTransport : public Transport {
 public:
  HttplibTransport(const std::string& base_url, std::chrono::milliseconds timeout)
      : base_(split_base_url(base_url)), timeout_(timeout), client_(base_.origin) {
    const auto seconds = std::chrono::duration_cast<std::chrono::seconds>(timeout);
    const auto micros =
        std::chrono::duration_cast<std::chrono::microseconds>(timeout - seconds).count();
    client_.set_connection_timeout(seconds.count(), micros);
    client_.set_read_timeout(seconds.count(), micros);
    client_.set_write_timeout(seconds.count(), micros);
  }

  HttpResponse post(const std::string& path, const std::string& body,
                    const HttpHeaders& headers) override {
    httplib::Headers h;
    for (const auto& [key, value] : headers) h.emplace(key, value);
    const auto started = std::chrono::steady_clock::now();
    auto result = client_.Post(base_.prefix + path, h, body, "application/json");
    if (!result) {
      const auto elapsed = std::chrono::steady_clock::now() - started;
      const auto error = result.error();
      const std::string what = "POST " + base_.prefix + path + ": " + httplib::to_string(error);
      if (error == httplib::Error::ConnectionTimeout ||
          (error == httplib::Error::Read && elapsed >= timeout_)) {
        throw TimeoutError(what);
      }
      throw TransientError(what);
    }
    return {result->status, result->body};
  }

 private:
  BaseUrl base_;
  std::chrono::milliseconds timeout_;
  httplib::Client client_;
};

std::string error_message(const HttpResponse& response) {
  try {
    const auto body = json::parse(response.body);
    if (body.contains("error") && body["error"].contains("message")) {
      return body["error"]["message"].get<std::string>();
    }
  } catch (const json::exception&) {
  }
  return response.body.substr(0, 200);
}

}  // namespace

std::unique_ptr<Transport> make_http_transport(const std::string& base_url,
                                               std::chrono::milliseconds timeout) {
  return std::make_unique<HttplibTransport>(base_url, timeout);
}

OpenAiBackend::OpenAiBackend(GatewayConfig config, std::unique_ptr<Transport> transport,
                             std::string api_key)
    : config_(std::move(config)), transport_(std::move(transport)), api_key_(std::move(api_key)) {
  if (!transport_) throw DataError("openai backend: no transport");
}

std::unique_ptr<OpenAiBackend> OpenAiBackend::from_environment(const GatewayConfig& config) {
  const char* key = std::getenv(config.api_key_env.c_str());
  if (key == nullptr || *key == '\0') {
    throw AuthenticationError("environment variable " + config.api_key_env + " is not set");
  }
  return std::make_unique<OpenAiBackend>(config, make_http_transport(config.base_url, config.timeout),
                                         key);
}

json OpenAiBackend::post_json(const std::string& path, const json& body) {
  const HttpHeaders headers = {{"Authorization", "Bearer " + api_key_}};
  const HttpResponse response = transport_->post(path, body.dump(), headers);
  const std::string what = "HTTP " + std::to_string(response.status) + " from " + path;
  if (response.status == 401 || response.status == 403) {
    throw AuthenticationError(what + ": " + error_message(response));
  }
  if (response.status == 408) throw TimeoutError(what);
  if (response.status == 429 || response.status >= 500) {
    throw TransientError(what + ": " + error_message(response));
  }
  if (response.status < 200 || response.status >= 300) {
    throw GatewayError(what + ": " + error_message(response));
  }
  try {
    return json::parse(response.body);
  } catch (const json::exception& e) {
    throw GatewayError(what + ": unparseable body: " + e.what());
  }
}

Completion OpenAiBackend::complete(const std::string& prompt) {
  if (config_.model.empty()) throw DataError("gateway: no chat model configured");
  const json request = {{"model", config_.model},
                        {"temperature", config_.temperature},
                        {"messages", json::array({{{"role", "user"}, {"content", prompt}}})}};
  const json reply = post_json("/chat/completions", request);
  try {
    Completion c;
    c.text = reply.at("choices").at(0).at("message").at("content").get<std::string>();
    if (auto usage = reply.find("usage"); usage != reply.end() && usage->is_object()) {
      if (usage->contains("prompt_tokens")) c.prompt_tokens = (*usage)["prompt_tokens"].get<std::int64_t>();
      if (usage->contains("completion_tokens")) {
        c.completion_tokens = (*usage)["completion_tokens"].get<std::int64_t>();
      }
    }
    return c;
  } catch (const json::exception& e) {
    throw GatewayError(std::string("malformed chat completion reply: ") + e.what());
  }
}

std::vector<double> OpenAiBackend::embed(const std::string& text) {
  if (config_.embedding_model.empty()) throw DataError("gateway: no embedding model configured");
  const json reply = post_json("/embeddings", {{"model", config_.embedding_model}, {"input", text}});
  try {
    return reply.at("data").at(0).at("embedding").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw GatewayError(std::string("malformed embedding reply: ") + e.what());
  }
}

}  // namespace qbd
