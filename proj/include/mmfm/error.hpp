#pragma once

#include <stdexcept>
#include <string>

namespace mmfm {

// Malformed or out-of-contract input (wrong dimensions, negative values...).
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A linear system that cannot be solved reliably (rank-deficient CSI).
class SingularMatrixError : public std::runtime_error {
 public:
  SingularMatrixError(const std::string& what, double condition)
      : std::runtime_error(what), condition_(condition) {}
  double condition() const noexcept { return condition_; }

 private:
  double condition_;
};

// NaN/Inf in activations or losses, or an iterative solver that failed to
// bracket its root.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Binary file decoding failures. The kind lets callers tell a foreign file
// from a truncated one.
class FormatError : public std::runtime_error {
 public:
  enum class Kind { kBadMagic, kVersionMismatch, kTruncated, kIo };

  FormatError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

// Pipeline stage invoked before the artifact it depends on exists.
class PrerequisiteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mmfm
