#pragma once

#include <stdexcept>
#include <string>

namespace bladca {

/// Malformed input: bad documents, dimension mismatches, violated preconditions.
/// Maps to CLI exit code 2.
class ValidationError : public std::runtime_error {
public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numerical failure: non-convergence, singular systems, domain violations
/// hit while evaluating. Maps to CLI exit code 3.
class NumericalError : public std::runtime_error {
public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace bladca
