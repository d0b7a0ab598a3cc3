#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace qbd {

// Base for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input data: malformed files, invariant violations, unknown ids.
class DataError : public Error {
 public:
  using Error::Error;
};

// A metric whose denominator vanishes (e.g. tau_b with every pair tied).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

// Failures talking to an LLM backend.
class GatewayError : public Error {
 public:
  using Error::Error;
};

class AuthenticationError : public GatewayError {
 public:
  using GatewayError::GatewayError;
};

class TimeoutError : public GatewayError {
 public:
  using GatewayError::GatewayError;
};

// Retryable failure (HTTP 429/5xx, dropped connection). Only raised by
// backends; the gateway turns it into RetryExhaustedError once the retry
// budget is spent.
class TransientError : public GatewayError {
 public:
  using GatewayError::GatewayError;
};

class RetryExhaustedError : public GatewayError {
 public:
  RetryExhaustedError(const std::string& what, std::size_t attempts)
      : GatewayError(what), attempts_(attempts) {}
  std::size_t attempts() const { return attempts_; }

 private:
  std::size_t attempts_;
};

// Optimistic concurrency failure in the review store.
class RevisionConflictError : public Error {
 public:
  RevisionConflictError(const std::string& what, long expected, long actual)
      : Error(what), expected_(expected), actual_(actual) {}
  long expected() const { return expected_; }
  long actual() const { return actual_; }

 private:
  long expected_;
  long actual_;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

}  // namespace qbd
