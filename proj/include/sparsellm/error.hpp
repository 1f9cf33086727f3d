#pragma once

#include <stdexcept>
#include <cstddef>
#include <string>
#include <utility>

namespace sparsellm {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Operand dimensions do not agree.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// Non-finite entries or otherwise malformed numeric input.
class InvalidInputError : public Error {
public:
  using Error::Error;
};

/// Configuration value out of range, unknown key, or conflicting sources.
class ConfigError : public Error {
public:
  ConfigError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

private:
  std::string field_;
};

/// A required input (e.g. calibration activations) was not supplied.
class MissingInputError : public Error {
public:
  using Error::Error;
};

/// Model container, calibration container or report could not be parsed.
class FormatError : public Error {
public:
  using Error::Error;
};

/// A solver step produced a non-finite value or a factorization failed.
class NumericalError : public Error {
public:
  using Error::Error;
};

/// A structured result violates one of its own invariants.
class ValidationError : public Error {
public:
  using Error::Error;
};

/// File system failure; the message carries the path.
class IoError : public Error {
public:
  using Error::Error;
};

/// Stored sparsity audit does not match the weights on disk.
class AuditError : public Error {
public:
  using Error::Error;
};

/// Wraps a failure raised while pruning one block of a network. The
/// original exception is nested.
class BlockFailure : public Error {
public:
  BlockFailure(std::size_t block, const std::string& what)
      : Error("block " + std::to_string(block) + ": " + what), block_(block) {}

  std::size_t block() const noexcept { return block_; }

private:
  std::size_t block_;
};

}  // namespace sparsellm
