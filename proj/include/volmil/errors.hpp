#ifndef VOLMIL_ERRORS_HPP_
#define VOLMIL_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace volmil {

/// Malformed or inconsistent configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Filesystem or serialization failure.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Violated precondition on data or model specs (spec mismatch, a metric
/// undefined for the given labels, too few patients per stratum).
class PreconditionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values during optimization.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace volmil

#endif  // VOLMIL_ERRORS_HPP_
