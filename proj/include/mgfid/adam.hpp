#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "mgfid/errors.hpp"
#include "mgfid/tape.hpp"
#include "mgfid/tensor.hpp"

namespace mgfid {

// Named, ordered set of trainable tensors. Order is fixed at construction and
// defines the checkpoint layout.
template <typename T>
class ParamStore {
 public:
  int add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw ShapeError("param store: duplicate name " + name);
    index_[name] = static_cast<int>(names_.size());
    names_.push_back(name);
    values_.push_back(std::move(init));
    return static_cast<int>(names_.size()) - 1;
  }

  int size() const { return static_cast<int>(names_.size()); }
  const std::string& name(int i) const { return names_[i]; }
  Tensor<T>& value(int i) { return values_[i]; }
  const Tensor<T>& value(int i) const { return values_[i]; }

  int index_of(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  Tensor<T>& operator[](const std::string& name) {
    int i = index_of(name);
    if (i < 0) throw ShapeError("param store: unknown name " + name);
    return values_[i];
  }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& v : values_) n += v.numel();
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
  std::unordered_map<std::string, int> index_;
};

// Gradients of `loss` with respect to every parameter in `params`, in store
// order. Parameters unreachable from the loss get zero tensors.
template <typename T>
std::vector<Tensor<T>> gradient(Tape<T>& tape, Var loss, const ParamStore<T>& params) {
  tape.backward(loss);
  std::vector<Tensor<T>> grads;
  grads.reserve(params.size());
  for (int i = 0; i < params.size(); ++i) {
    grads.push_back(tape.param_grad(i, params.value(i).shape()));
  }
  return grads;
}

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction.
template <typename T>
class AdamState {
 public:
  AdamState(const ParamStore<T>& params, AdamConfig cfg) : cfg_(cfg) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (int i = 0; i < params.size(); ++i) {
      m_.push_back(Tensor<T>::zeros(params.value(i).shape()));
      v_.push_back(Tensor<T>::zeros(params.value(i).shape()));
    }
  }

  int64_t step_count() const { return step_; }
  const AdamConfig& config() const { return cfg_; }
  const Tensor<T>& first_moment(int i) const { return m_[i]; }
  const Tensor<T>& second_moment(int i) const { return v_[i]; }

  void step(ParamStore<T>& params, const std::vector<Tensor<T>>& grads) {
    if (static_cast<int>(grads.size()) != params.size()) {
      throw ShapeError("adam: got " + std::to_string(grads.size()) + " gradients for " +
                       std::to_string(params.size()) + " parameters");
    }
    for (int i = 0; i < params.size(); ++i) {
      if (!grads[i].same_shape(params.value(i))) {
        throw ShapeError("adam: gradient shape " + grads[i].shape_str() + " vs parameter " +
                         params.value(i).shape_str() + " for " + params.name(i));
      }
    }
    ++step_;
    T b1 = T(cfg_.beta1), b2 = T(cfg_.beta2);
    T corr1 = T(1) - std::pow(b1, T(step_));
    T corr2 = T(1) - std::pow(b2, T(step_));
    T lr = T(cfg_.lr), eps = T(cfg_.eps);
    for (int i = 0; i < params.size(); ++i) {
      Tensor<T>& p = params.value(i);
      Tensor<T>& m = m_[i];
      Tensor<T>& v = v_[i];
      const Tensor<T>& g = grads[i];
      for (int64_t j = 0; j < p.numel(); ++j) {
        m[j] = b1 * m[j] + (T(1) - b1) * g[j];
        v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
        T mhat = m[j] / corr1;
        T vhat = v[j] / corr2;
        p[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  int64_t step_ = 0;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
};

}  // namespace mgfid
