#pragma once

#include <stdexcept>
#include <string>

namespace siblurry {

/// Base for every error raised by the library. `kind()` is a stable,
/// machine-readable tag used by the CLI's error records.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};

/// Shape or precondition violation at an API boundary.
struct ContractError : Error {
  explicit ContractError(const std::string& m) : Error("contract", m) {}
};

struct IngestionError : Error {
  explicit IngestionError(const std::string& m) : Error("ingestion", m) {}
};

struct CorruptionError : Error {
  explicit CorruptionError(const std::string& m) : Error("corruption", m) {}
};

struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io", m) {}
};

struct LoadError : Error {
  explicit LoadError(const std::string& m) : Error("load", m) {}
};

/// Raised by the training loop when a loss is NaN/inf. `dump()` holds a JSON
/// description of the offending batch.
class NonFiniteLossError : public Error {
 public:
  NonFiniteLossError(const std::string& m, std::string dump)
      : Error("non_finite_loss", m), dump_(std::move(dump)) {}

  const std::string& dump() const noexcept { return dump_; }

 private:
  std::string dump_;
};

}  // namespace siblurry
