#pragma once

#include <stdexcept>
#include <string>

namespace iftk {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Bad or inconsistent configuration (CLI exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Corpus file ingestion or invariant failure.
class CorpusError : public Error {
 public:
  using Error::Error;
};

/// Backend transport or protocol failure (CLI exit code 3).
class BackendError : public Error {
 public:
  explicit BackendError(const std::string& what, bool retryable = false)
      : Error(what), retryable_(retryable) {}
  bool retryable() const { return retryable_; }

 private:
  bool retryable_ = false;
};

/// A backend was asked for something it cannot do (e.g. logprob scoring).
class CapabilityError : public BackendError {
 public:
  explicit CapabilityError(const std::string& what) : BackendError(what, false) {}
};

/// Raised when the configured spend cap would be exceeded (CLI exit code 4).
class SpendCapError : public Error {
 public:
  using Error::Error;
};

}  // namespace iftk
