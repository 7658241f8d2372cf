#pragma once

#include <stdexcept>
#include <string>

namespace nextscale {

// Violated precondition: bad shapes, out-of-range indices, invalid configs.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite values produced by an operation, or a diverging run.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Degenerate but well-formed input, e.g. an all-zero MRI slice.
class DegenerateInputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) {
    throw ContractError(message);
  }
}

}  // namespace nextscale
