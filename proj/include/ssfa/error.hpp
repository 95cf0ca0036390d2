#pragma once

#include <stdexcept>
#include <string>

namespace ssfa {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file contents (bad PGM header, bad manifest or checkpoint syntax).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Unreadable, unwritable or truncated files.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A manifest line references a file that cannot be found.
class ResolutionError : public Error {
 public:
  using Error::Error;
};

/// Dataset-level invariants violated (duplicate clip ids, label range, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Dimension mismatch between vectors, matrices or layer specs.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Caller broke a documented precondition (empty batch, ground truth missing, ...).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

class MiningError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite gradient encountered during an update; `term()` names the
/// objective term that introduced it.
class OptimizerError : public Error {
 public:
  explicit OptimizerError(std::string term)
      : Error("non-finite gradient in term '" + term + "'"), term_(std::move(term)) {}
  const std::string& term() const noexcept { return term_; }

 private:
  std::string term_;
};

/// Every candidate of a hyperparameter search stage diverged.
class SearchError : public Error {
 public:
  explicit SearchError(std::string stage)
      : Error("all candidates diverged in search stage '" + stage + "'"), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace ssfa
