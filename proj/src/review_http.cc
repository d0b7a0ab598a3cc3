#include "qbd/review_http.h"

#include <httplib.h>
#include <spdlog/spdlog.h>

#include <atomic>

#include "qbd/error.h"

namespace qbd {

using json = nlohmann::json;

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message, json extra = json::object()) {
  extra["error"] = message;
  send_json(res, status, extra);
}

json parse_body(const httplib::Request& req) {
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    throw DataError(std::string("request body is not JSON: ") + e.what());
  }
}

long parse_id(const std::string& text) {
  try {
    std::size_t used = 0;
    const long id = std::stol(text, &used);
    if (used == text.size()) return id;
  } catch (const std::logic_error&) {
  }
  throw NotFoundError("no review item '" + text + "'");
}

// Runs a handler and translates library exceptions into HTTP statuses.
template <typename Fn>
httplib::Server::Handler guarded(Fn fn) {
  return [fn](const httplib::Request& req, httplib::Response& res) {
    try {
      fn(req, res);
    } catch (const RevisionConflictError& e) {
      send_error(res, 409, e.what(), {{"expected", e.expected()}, {"revision", e.actual()}});
    } catch (const NotFoundError& e) {
      send_error(res, 404, e.what());
    } catch (const DataError& e) {
      send_error(res, 400, e.what());
    } catch (const json::exception& e) {
      send_error(res, 400, e.what());
    } catch (const std::exception& e) {
      spdlog::error("review API: {}", e.what());
      send_error(res, 500, e.what());
    }
  };
}

json instructions_json(const InstructionsDoc& doc) {
  return {{"text", doc.text}, {"version", doc.version}, {"revision", doc.version}, {"updated_at", doc.updated_at}};
}

}  // namespace

struct ReviewServer::Impl {
  ReviewStore& store;
  ReviewServerOptions options;
  httplib::Server server;
  std::atomic<bool> bound{false};

  Impl(ReviewStore& s, ReviewServerOptions o) : store(s), options(std::move(o)) { routes(); }

  void routes() {
    server.Get("/items", guarded([this](const httplib::Request& req, httplib::Response& res) {
      std::optional<ReviewStatus> status;
      if (req.has_param("status")) status = review_status_from(req.get_param_value("status"));
      json items = json::array();
      for (const auto& item : store.list(status)) items.push_back(to_json(item));
      send_json(res, 200, {{"items", items}, {"revision", store.sequence()}});
    }));
    server.Get(R"(/items/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, 200, to_json(store.get(parse_id(req.matches[1]))));
    }));
    server.Post(R"(/items/([^/]+)/action)",
                guarded([this](const httplib::Request& req, httplib::Response& res) {
                  const long id = parse_id(req.matches[1]);
                  const json body = parse_body(req);
                  if (!body.contains("expected_revision") || !body["expected_revision"].is_number_integer()) {
                    throw DataError("expected_revision is required");
                  }
                  const auto action = review_action_from_json(body.at("action"));
                  const auto item = store.apply_action(id, body["expected_revision"].get<long>(), action);
                  send_json(res, 200, to_json(item));
                }));
    server.Get("/instructions", guarded([this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, instructions_json(store.instructions()));
    }));
    server.Put("/instructions", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req);
      if (!body.contains("text") || !body["text"].is_string()) throw DataError("text is required");
      std::optional<long> expected;
      if (body.contains("expected_version") && !body["expected_version"].is_null()) {
        expected = body["expected_version"].get<long>();
      }
      send_json(res, 200, instructions_json(store.put_instructions(body["text"].get<std::string>(), expected)));
    }));
    server.Post("/export", guarded([this](const httplib::Request& req, httplib::Response& res) {
      std::set<ReviewStatus> statuses{ReviewStatus::accepted, ReviewStatus::corrected};
      if (!req.body.empty()) {
        const json body = parse_body(req);
        if (body.contains("statuses")) {
          statuses.clear();
          for (const auto& s : body["statuses"]) statuses.insert(review_status_from(s.get<std::string>()));
        }
      }
      const auto dataset = store.export_reviewed(statuses);
      const auto path = options.export_path.value_or(store.directory() / "export.jsonl");
      export_dataset(dataset, path);
      send_json(res, 200, {{"path", path.string()},
                           {"record_count", dataset.records.size()},
                           {"revision", store.sequence()}});
    }));
    if (options.static_dir) {
      if (!server.set_mount_point("/", options.static_dir->string())) {
        throw DataError("static directory " + options.static_dir->string() + " does not exist");
      }
    }
  }
};

ReviewServer::ReviewServer(ReviewStore& store, ReviewServerOptions options)
    : impl_(std::make_unique<Impl>(store, std::move(options))) {}

ReviewServer::~ReviewServer() { stop(); }

int ReviewServer::bind() {
  int port = impl_->options.port;
  if (port == 0) {
    port = impl_->server.bind_to_any_port(impl_->options.host);
    if (port < 0) throw Error("cannot bind review server on " + impl_->options.host);
  } else if (!impl_->server.bind_to_port(impl_->options.host, port)) {
    throw Error("cannot bind review server on " + impl_->options.host + ":" + std::to_string(port));
  }
  impl_->bound = true;
  return port;
}

void ReviewServer::run() {
  if (!impl_->bound) throw Error("review server: bind() before run()");
  impl_->server.listen_after_bind();
}

void ReviewServer::stop() {
  if (impl_) impl_->server.stop();
}

bool ReviewServer::running() const { return impl_->server.is_running(); }

}  // namespace qbd
