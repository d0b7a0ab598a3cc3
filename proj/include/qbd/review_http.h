#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "qbd/review_service.h"

namespace qbd {

struct ReviewServerOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::optional<std::filesystem::path> static_dir;
  std::optional<std::filesystem::path> export_path;  // default: <store>/export.jsonl
};

// JSON API over a ReviewStore:
//   GET  /items[?status=]          list items
//   GET  /items/{id}               one item
//   POST /items/{id}/action        {"expected_revision": n, "action": {...}}
//   GET  /instructions             current instructions document
//   PUT  /instructions             {"text": ..., "expected_version": n?}
//   POST /export                   {"statuses": [...]?}
// Errors map to 400 (bad input), 404 (unknown item) and 409 (stale revision).
class ReviewServer {
 public:
  ReviewServer(ReviewStore& store, ReviewServerOptions options);
  ~ReviewServer();
  ReviewServer(const ReviewServer&) = delete;
  ReviewServer& operator=(const ReviewServer&) = delete;

  // Binds and returns the bound port. Must precede run().
  int bind();
  // Blocks until stop() is called.
  void run();
  void stop();
  bool running() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace qbd
