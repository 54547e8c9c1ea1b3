#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace tpm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid argument or configuration value.
class ParameterError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf appeared during a forward pass or a loss evaluation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// An operation was invoked in the wrong lifecycle state (e.g. backward before forward).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Input has no usable spread: identical points, or a mask that hides nothing/everything.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint and configuration disagree on tensor names or dimensions.
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary file. `offset` is the byte position where decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace tpm
