#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mgfid/errors.hpp"

namespace mgfid {

// Dense row-major real tensor. Everything the model computes on lives in one
// of these; the autodiff tape in tape.hpp records operations over them.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(checked_numel(shape_), T(0));
  }

  Tensor(std::vector<int> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != checked_numel(shape_)) {
      throw ShapeError("tensor: data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  static Tensor row(std::vector<T> values) {
    int n = static_cast<int>(values.size());
    return Tensor({1, n}, std::move(values));
  }

  static Tensor scalar(T value) { return Tensor({1, 1}, {value}); }

  const std::vector<int>& shape() const { return shape_; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  int rank() const { return static_cast<int>(shape_.size()); }

  // 2-d accessors; rank-1 tensors are treated as a single row.
  int rows() const {
    if (rank() == 1) return 1;
    require_rank2();
    return shape_[0];
  }
  int cols() const {
    if (rank() == 1) return shape_[0];
    require_rank2();
    return shape_[1];
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator()(int r, int c) { return data_[static_cast<int64_t>(r) * cols() + c]; }
  T operator()(int r, int c) const { return data_[static_cast<int64_t>(r) * cols() + c]; }
  T& operator[](int64_t i) { return data_[i]; }
  T operator[](int64_t i) const { return data_[i]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool is_scalar() const { return numel() == 1; }

  bool all_finite() const {
    for (const T& v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  std::string shape_str() const { return shape_string(shape_); }

  static std::string shape_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) os << " x ";
      os << shape[i];
    }
    os << "]";
    return os.str();
  }

 private:
  static int64_t checked_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw ShapeError("tensor: non-positive dimension in " + shape_string(shape));
      n *= d;
    }
    return n;
  }

  void require_rank2() const {
    if (rank() != 2) {
      throw ShapeError("tensor: expected rank-2 tensor, got " + shape_str());
    }
  }

  std::vector<int> shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace mgfid
