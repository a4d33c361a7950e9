#pragma once

#include <stdexcept>
#include <string>

namespace dpa {

/// Shape or extent disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A NaN or Inf escaped an operation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An embedding (or head) row whose norm is too small to normalize.
class DegenerateEmbeddingError : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Bad argument that is not a shape problem: label out of range, invalid
/// hyperparameter, malformed config value.
class ValueError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or unreadable persisted artifact.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dpa
