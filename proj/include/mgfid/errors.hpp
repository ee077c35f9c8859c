#pragma once

#include <stdexcept>
#include <string>

namespace mgfid {

// Shape or argument disagreement between tensors/operations.
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

// Non-finite value produced by a numeric operation.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed input data (dataset files, checkpoints, configs).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Metric computed on degenerate input (e.g. AUC with one class).
class SingleClassError : public std::invalid_argument {
 public:
  explicit SingleClassError(const std::string& what) : std::invalid_argument(what) {}
};

// Training loss became non-finite.
class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace mgfid
