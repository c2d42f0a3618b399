#pragma once

#include <stdexcept>
#include <string>

namespace mcad {

/// Base of every error raised by the engine. `kind()` is a short
/// machine-readable class name used by the CLI for its one-line error report.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

/// Violated precondition: shapes, ranges, undefined sparse reads.
struct ContractError : Error {
  explicit ContractError(const std::string& m) : Error("contract", m) {}
};

/// Non-finite value produced by a forward op or a perturbed evaluation.
struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error("numeric", m) {}
};

/// Requested id missing from a loaded teacher bundle or dataset.
struct IngestionError : Error {
  explicit IngestionError(const std::string& m) : Error("ingestion", m) {}
};

/// Pair-score table lacks a pair that the top-k selection requires.
struct CoverageError : Error {
  explicit CoverageError(const std::string& m) : Error("coverage", m) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};

struct ParseError : Error {
  explicit ParseError(const std::string& m) : Error("parse", m) {}
};

/// Malformed binary file: bad magic, version, truncated payload, invariant breach.
struct FormatError : Error {
  explicit FormatError(const std::string& m) : Error("format", m) {}
};

struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io", m) {}
};

/// Training produced a non-finite loss.
struct DivergenceError : Error {
  explicit DivergenceError(const std::string& m) : Error("divergence", m) {}
};

struct GenerationError : Error {
  explicit GenerationError(const std::string& m) : Error("generation", m) {}
};

}  // namespace mcad
