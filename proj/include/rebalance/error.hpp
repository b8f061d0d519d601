#pragma once

#include <stdexcept>
#include <string>

namespace rebalance {

/// Failure categories; each maps onto a CLI exit code.
enum class ErrorKind {
  usage = 1,
  ingestion = 2,
  compatibility = 3,
  missing_artifact = 4,
  numeric = 5,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

struct UsageError : Error {
  explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

struct IngestError : Error {
  explicit IngestError(const std::string& what) : Error(ErrorKind::ingestion, what) {}
};

struct CompatibilityError : Error {
  explicit CompatibilityError(const std::string& what) : Error(ErrorKind::compatibility, what) {}
};

struct MissingArtifactError : Error {
  explicit MissingArtifactError(const std::string& what)
      : Error(ErrorKind::missing_artifact, what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

}  // namespace rebalance
