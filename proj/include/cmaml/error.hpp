#pragma once

#include <stdexcept>
#include <string>

namespace cmaml {

// Incompatible tensor shapes or malformed arguments to an op.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite values, domain violations, solver non-convergence, divergence.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad configuration values, CLI arguments, or episode requests that cannot be met.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// File access and checkpoint/CSV format problems.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cmaml
