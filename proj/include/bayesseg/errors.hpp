#pragma once
// Error hierarchy shared by every module. The CLI maps these onto exit codes.

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bayesseg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents disagree; `dimension()` names the offending axis.
class ShapeError : public Error {
 public:
  ShapeError(const std::string& op, std::string dimension, const std::string& detail)
      : Error(op + ": " + dimension + ": " + detail), dimension_(std::move(dimension)) {}
  const std::string& dimension() const noexcept { return dimension_; }

 private:
  std::string dimension_;
};

/// Input outside an operation's domain (log of a non-positive value, exp overflow).
class DomainError : public Error {
 public:
  DomainError(const std::string& op, std::size_t index, const std::string& detail)
      : Error(op + ": element " + std::to_string(index) + ": " + detail), index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

/// Operation called in the wrong lifecycle state (consumed graph, missing cached sample).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values produced during a computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Dataset or file problems.
class DataError : public Error {
 public:
  using Error::Error;
};

class MissingPairError : public DataError {
 public:
  explicit MissingPairError(std::string orphan)
      : DataError("no matching image/mask pair for '" + orphan + "'"), orphan_(std::move(orphan)) {}
  const std::string& orphan() const noexcept { return orphan_; }

 private:
  std::string orphan_;
};

class UnreadableImageError : public DataError {
 public:
  using DataError::DataError;
};

class EmptyImageError : public DataError {
 public:
  using DataError::DataError;
};

/// Checkpoint or prediction file with a wrong magic, version or layout.
class CheckpointError : public DataError {
 public:
  using DataError::DataError;
};

/// Invalid configuration; `field()` names the offending key path.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& detail)
      : Error(field.empty() ? detail : field + ": " + detail), field_(std::move(field)), detail_(detail) {}
  const std::string& field() const noexcept { return field_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::string field_;
  std::string detail_;
};

}  // namespace bayesseg
