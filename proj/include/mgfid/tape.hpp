#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mgfid/errors.hpp"
#include "mgfid/tensor.hpp"

namespace mgfid {

template <typename T>
using EigenRowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<EigenRowMat<T>> mat_view(Tensor<T>& t) {
  return Eigen::Map<EigenRowMat<T>>(t.data(), t.rows(), t.cols());
}

template <typename T>
Eigen::Map<const EigenRowMat<T>> mat_view(const Tensor<T>& t) {
  return Eigen::Map<const EigenRowMat<T>>(t.data(), t.rows(), t.cols());
}

// Handle to a node on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// One attention segment: query rows [q_begin, q_begin+q_len) may attend
// key/value rows [kv_begin, kv_begin+kv_len). Segments let the K
// question-passage pairs share one tape node while keeping attention local to
// each pair.
struct AttnSegment {
  int q_begin = 0;
  int q_len = 0;
  int kv_begin = 0;
  int kv_len = 0;
};

struct AttentionSpec {
  int num_heads = 1;
  bool causal = false;                // within each segment; needs aligned q/kv rows
  std::vector<AttnSegment> segments;  // empty -> one segment over all rows
  std::vector<uint8_t> kv_valid;      // empty -> every kv row is a legal target
};

// Reverse-mode autodiff over Tensor<T>. Operations append nodes; backward()
// walks the record in reverse. One Tape corresponds to one forward pass; it
// is not thread-safe, but parameter tensors it references are only read.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // ---- leaves ----

  Var input(Tensor<T> value) {
    check_finite(value, "input");
    return push(std::move(value), nullptr, -1, {});
  }

  // Registers a parameter leaf. The tensor is referenced, not copied; the
  // same (pointer, index) pair is memoized so repeated uses share one node
  // and one gradient accumulator.
  Var param(const Tensor<T>* p, int param_index) {
    auto it = param_nodes_.find(param_index);
    if (it != param_nodes_.end()) return Var{it->second};
    Var v = push(Tensor<T>(), nullptr, param_index, {}, p);
    param_nodes_[param_index] = v.id;
    return v;
  }

  const Tensor<T>& value(Var v) const { return value_ref(v.id); }

  bool has_grad(Var v) const { return nodes_[v.id].has_grad; }

  const Tensor<T>& grad(Var v) const {
    if (!nodes_[v.id].has_grad) throw NumericError("grad: node has no gradient; run backward first");
    return nodes_[v.id].grad;
  }

  // Gradient of a parameter by registry index; zeros if the parameter was
  // never touched or is unreachable from the loss.
  Tensor<T> param_grad(int param_index, const std::vector<int>& shape) const {
    auto it = param_nodes_.find(param_index);
    if (it == param_nodes_.end() || !nodes_[it->second].has_grad) return Tensor<T>::zeros(shape);
    return nodes_[it->second].grad;
  }

  size_t size() const { return nodes_.size(); }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    const Tensor<T>&va = value_ref(a.id), &vb = value_ref(b.id);
    require_same_shape(va, vb, "add");
    Tensor<T> out = va;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
    return push(std::move(out), [a, b](Tape& t, const Node& n) {
      t.accumulate(a, n.grad);
      t.accumulate(b, n.grad);
    });
  }

  Var mul(Var a, Var b) {
    const Tensor<T>&va = value_ref(a.id), &vb = value_ref(b.id);
    require_same_shape(va, vb, "mul");
    Tensor<T> out = va;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= vb[i];
    return push(std::move(out), [a, b](Tape& t, const Node& n) {
      const Tensor<T>&xa = t.value_ref(a.id), &xb = t.value_ref(b.id);
      Tensor<T>& ga = t.ensure_grad(a.id);
      Tensor<T>& gb = t.ensure_grad(b.id);
      for (int64_t i = 0; i < n.grad.numel(); ++i) {
        ga[i] += n.grad[i] * xb[i];
        gb[i] += n.grad[i] * xa[i];
      }
    });
  }

  // alpha * a + beta, elementwise.
  Var affine(Var a, T alpha, T beta) {
    Tensor<T> out = value_ref(a.id);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = alpha * out[i] + beta;
    return push(std::move(out), [a, alpha](Tape& t, const Node& n) {
      Tensor<T>& ga = t.ensure_grad(a.id);
      for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += alpha * n.grad[i];
    });
  }

  Var neg(Var a) { return affine(a, T(-1), T(0)); }
  Var scale(Var a, T c) { return affine(a, c, T(0)); }

  Var log(Var a) {
    Tensor<T> out = value_ref(a.id);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
    return push(std::move(out), [a](Tape& t, const Node& n) {
      const Tensor<T>& xa = t.value_ref(a.id);
      Tensor<T>& ga = t.ensure_grad(a.id);
      for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i] / xa[i];
    });
  }

  Var exp(Var a) {
    Tensor<T> out = value_ref(a.id);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
    return push(std::move(out), [a](Tape& t, const Node& n) {
      Tensor<T>& ga = t.ensure_grad(a.id);
      const Tensor<T>& y = n.value;
      for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i] * y[i];
    });
  }

  // Elementwise x^p. Gradient at x == 0 is defined as 0 (the only uses keep
  // x >= 0 and p >= 0).
  Var pow(Var a, T p) {
    Tensor<T> out = value_ref(a.id);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::pow(out[i], p);
    return push(std::move(out), [a, p](Tape& t, const Node& n) {
      const Tensor<T>& xa = t.value_ref(a.id);
      Tensor<T>& ga = t.ensure_grad(a.id);
      for (int64_t i = 0; i < n.grad.numel(); ++i) {
        T x = xa[i];
        T d = (p == T(0) || x == T(0)) ? T(0) : p * std::pow(x, p - T(1));
        ga[i] += n.grad[i] * d;
      }
    });
  }

  Var relu(Var a) {
    Tensor<T> out = value_ref(a.id);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] > T(0) ? out[i] : T(0);
    return push(std::move(out), [a](Tape& t, const Node& n) {
      const Tensor<T>& xa = t.value_ref(a.id);
      Tensor<T>& ga = t.ensure_grad(a.id);
      for (int64_t i = 0; i < n.grad.numel(); ++i) {
        if (xa[i] > T(0)) ga[i] += n.grad[i];
      }
    });
  }

  // log(1 + e^x), overflow-safe.
  Var softplus(Var a) {
    Tensor<T> out = value_ref(a.id);
    for (int64_t i = 0; i < out.numel(); ++i) {
      T x = out[i];
      out[i] = std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
    }
    return push(std::move(out), [a](Tape& t, const Node& n) {
      const Tensor<T>& xa = t.value_ref(a.id);
      Tensor<T>& ga = t.ensure_grad(a.id);
      for (int64_t i = 0; i < n.grad.numel(); ++i) {
        T x = xa[i];
        T s = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
        ga[i] += n.grad[i] * s;
      }
    });
  }

  // ---- reductions / rearrangement ----

  Var sum(Var a) {
    const Tensor<T>& va = value_ref(a.id);
    T s = 0;
    for (int64_t i = 0; i < va.numel(); ++i) s += va[i];
    return push(Tensor<T>::scalar(s), [a](Tape& t, const Node& n) {
      Tensor<T>& ga = t.ensure_grad(a.id);
      T g = n.grad[0];
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
  }

  // Mean of rows r0..r1 inclusive -> [1 x cols].
  Var mean_rows(Var a, int r0, int r1) {
    const Tensor<T>& va = value_ref(a.id);
    if (r0 < 0 || r1 >= va.rows() || r0 > r1) {
      throw ShapeError("mean_rows: range [" + std::to_string(r0) + ", " + std::to_string(r1) +
                       "] outside " + va.shape_str());
    }
    int cols = va.cols();
    Tensor<T> out({1, cols});
    for (int r = r0; r <= r1; ++r) {
      for (int c = 0; c < cols; ++c) out[c] += va(r, c);
    }
    T inv = T(1) / T(r1 - r0 + 1);
    for (int c = 0; c < cols; ++c) out[c] *= inv;
    return push(std::move(out), [a, r0, r1, inv](Tape& t, const Node& n) {
      Tensor<T>& ga = t.ensure_grad(a.id);
      int cols = ga.cols();
      for (int r = r0; r <= r1; ++r) {
        for (int c = 0; c < cols; ++c) ga(r, c) += inv * n.grad[c];
      }
    });
  }

  // Rows r0..r1 inclusive.
  Var slice_rows(Var a, int r0, int r1) {
    const Tensor<T>& va = value_ref(a.id);
    if (r0 < 0 || r1 >= va.rows() || r0 > r1) {
      throw ShapeError("slice_rows: range [" + std::to_string(r0) + ", " + std::to_string(r1) +
                       "] outside " + va.shape_str());
    }
    int cols = va.cols();
    int n_rows = r1 - r0 + 1;
    Tensor<T> out({n_rows, cols});
    std::copy(va.data() + static_cast<int64_t>(r0) * cols,
              va.data() + static_cast<int64_t>(r1 + 1) * cols, out.data());
    return push(std::move(out), [a, r0](Tape& t, const Node& n) {
      Tensor<T>& ga = t.ensure_grad(a.id);
      int cols = ga.cols();
      for (int r = 0; r < n.grad.rows(); ++r) {
        for (int c = 0; c < cols; ++c) ga(r0 + r, c) += n.grad(r, c);
      }
    });
  }

  Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty operand list");
    int cols = value_ref(parts[0].id).cols();
    int rows = 0;
    for (Var p : parts) {
      const Tensor<T>& v = value_ref(p.id);
      if (v.cols() != cols) {
        throw ShapeError("concat_rows: column mismatch " + v.shape_str() + " vs " +
                         value_ref(parts[0].id).shape_str());
      }
      rows += v.rows();
    }
    Tensor<T> out({rows, cols});
    int at = 0;
    for (Var p : parts) {
      const Tensor<T>& v = value_ref(p.id);
      std::copy(v.data(), v.data() + v.numel(), out.data() + static_cast<int64_t>(at) * cols);
      at += v.rows();
    }
    std::vector<Var> keep(parts.begin(), parts.end());
    return push(std::move(out), [keep](Tape& t, const Node& n) {
      int at = 0;
      int cols = n.grad.cols();
      for (Var p : keep) {
        Tensor<T>& gp = t.ensure_grad(p.id);
        for (int r = 0; r < gp.rows(); ++r) {
          for (int c = 0; c < cols; ++c) gp(r, c) += n.grad(at + r, c);
        }
        at += gp.rows();
      }
    });
  }

  Var concat_rows(std::initializer_list<Var> parts) {
    std::vector<Var> v(parts);
    return concat_rows(std::span<const Var>(v));
  }

  Var transpose(Var a) {
    const Tensor<T>& va = value_ref(a.id);
    Tensor<T> out({va.cols(), va.rows()});
    mat_view(out) = mat_view(va).transpose();
    return push(std::move(out), [a](Tape& t, const Node& n) {
      Tensor<T>& ga = t.ensure_grad(a.id);
      mat_view(ga) += mat_view(n.grad).transpose();
    });
  }

  // out[i] = a(i, ids[i]) -> [rows x 1].
  Var rows_pick(Var a, std::vector<int> ids) {
    const Tensor<T>& va = value_ref(a.id);
    if (static_cast<int>(ids.size()) != va.rows()) {
      throw ShapeError("rows_pick: need one index per row of " + va.shape_str());
    }
    for (int i = 0; i < va.rows(); ++i) {
      if (ids[i] < 0 || ids[i] >= va.cols()) {
        throw ShapeError("rows_pick: index " + std::to_string(ids[i]) + " out of range for " +
                         va.shape_str());
      }
    }
    Tensor<T> out({va.rows(), 1});
    for (int i = 0; i < va.rows(); ++i) out[i] = va(i, ids[i]);
    auto ids_p = std::make_shared<std::vector<int>>(std::move(ids));
    return push(std::move(out), [a, ids_p](Tape& t, const Node& n) {
      Tensor<T>& ga = t.ensure_grad(a.id);
      for (int i = 0; i < n.grad.rows(); ++i) ga(i, (*ids_p)[i]) += n.grad[i];
    });
  }

  // Coordinatewise max over same-shaped tensors; ties keep the earliest
  // operand, which also receives the gradient.
  Var max_elem(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("max_elem: empty operand list");
    const Tensor<T>& first = value_ref(parts[0].id);
    for (Var p : parts) {
      require_same_shape(first, value_ref(p.id), "max_elem");
    }
    Tensor<T> out = first;
    auto argmax = std::make_shared<std::vector<int>>(out.numel(), 0);
    for (size_t k = 1; k < parts.size(); ++k) {
      const Tensor<T>& v = value_ref(parts[k].id);
      for (int64_t i = 0; i < out.numel(); ++i) {
        if (v[i] > out[i]) {
          out[i] = v[i];
          (*argmax)[i] = static_cast<int>(k);
        }
      }
    }
    std::vector<Var> keep(parts.begin(), parts.end());
    return push(std::move(out), [keep, argmax](Tape& t, const Node& n) {
      for (int64_t i = 0; i < n.grad.numel(); ++i) {
        t.ensure_grad(keep[(*argmax)[i]].id)[i] += n.grad[i];
      }
    });
  }

  Var max_elem(std::initializer_list<Var> parts) {
    std::vector<Var> v(parts);
    return max_elem(std::span<const Var>(v));
  }

  // Adds a [1 x cols] vector to a single row.
  Var add_row(Var a, int row, Var vec) {
    const Tensor<T>&va = value_ref(a.id), &vv = value_ref(vec.id);
    if (row < 0 || row >= va.rows()) {
      throw ShapeError("add_row: row " + std::to_string(row) + " outside " + va.shape_str());
    }
    if (vv.rows() != 1 || vv.cols() != va.cols()) {
      throw ShapeError("add_row: shape mismatch " + va.shape_str() + " vs " + vv.shape_str());
    }
    Tensor<T> out = va;
    for (int c = 0; c < va.cols(); ++c) out(row, c) += vv[c];
    return push(std::move(out), [a, vec, row](Tape& t, const Node& n) {
      t.accumulate(a, n.grad);
      Tensor<T>& gv = t.ensure_grad(vec.id);
      for (int c = 0; c < n.grad.cols(); ++c) gv[c] += n.grad(row, c);
    });
  }

  // ---- linear algebra ----

  Var matmul(Var a, Var b) {
    const Tensor<T>&va = value_ref(a.id), &vb = value_ref(b.id);
    if (va.cols() != vb.rows()) {
      throw ShapeError("matmul: shape mismatch " + va.shape_str() + " vs " + vb.shape_str());
    }
    Tensor<T> out({va.rows(), vb.cols()});
    mat_view(out).noalias() = mat_view(va) * mat_view(vb);
    return push(std::move(out), [a, b](Tape& t, const Node& n) {
      const Tensor<T>&xa = t.value_ref(a.id), &xb = t.value_ref(b.id);
      mat_view(t.ensure_grad(a.id)).noalias() += mat_view(n.grad) * mat_view(xb).transpose();
      mat_view(t.ensure_grad(b.id)).noalias() += mat_view(xa).transpose() * mat_view(n.grad);
    });
  }

  // Row-wise softmax with max subtraction.
  Var softmax_rows(Var a) {
    const Tensor<T>& va = value_ref(a.id);
    Tensor<T> out = va;
    for (int r = 0; r < out.rows(); ++r) {
      softmax_row_inplace(&out(r, 0), out.cols());
    }
    return push(std::move(out), [a](Tape& t, const Node& n) {
      Tensor<T>& ga = t.ensure_grad(a.id);
      const Tensor<T>& p = n.value;
      for (int r = 0; r < p.rows(); ++r) {
        T dot = 0;
        for (int c = 0; c < p.cols(); ++c) dot += n.grad(r, c) * p(r, c);
        for (int c = 0; c < p.cols(); ++c) ga(r, c) += p(r, c) * (n.grad(r, c) - dot);
      }
    });
  }

  // Embedding lookup: rows of `table` selected by ids.
  Var embed(std::vector<int> ids, Var table) {
    const Tensor<T>& tv = value_ref(table.id);
    if (ids.empty()) throw ShapeError("embed: empty id list");
    for (int id : ids) {
      if (id < 0 || id >= tv.rows()) {
        throw ShapeError("embed: id " + std::to_string(id) + " out of range for table " +
                         tv.shape_str());
      }
    }
    int cols = tv.cols();
    Tensor<T> out({static_cast<int>(ids.size()), cols});
    for (size_t i = 0; i < ids.size(); ++i) {
      std::copy(tv.data() + static_cast<int64_t>(ids[i]) * cols,
                tv.data() + static_cast<int64_t>(ids[i] + 1) * cols,
                out.data() + static_cast<int64_t>(i) * cols);
    }
    auto ids_p = std::make_shared<std::vector<int>>(std::move(ids));
    return push(std::move(out), [table, ids_p](Tape& t, const Node& n) {
      Tensor<T>& gt = t.ensure_grad(table.id);
      int cols = gt.cols();
      for (size_t i = 0; i < ids_p->size(); ++i) {
        for (int c = 0; c < cols; ++c) gt((*ids_p)[i], c) += n.grad(static_cast<int>(i), c);
      }
    });
  }

  // Per-row layer normalization with learned gain and bias ([1 x cols] each).
  Var layer_norm(Var a, Var gain, Var bias, T eps = T(1e-5)) {
    const Tensor<T>&va = value_ref(a.id), &vg = value_ref(gain.id), &vb = value_ref(bias.id);
    int cols = va.cols();
    if (vg.rows() != 1 || vg.cols() != cols || vb.rows() != 1 || vb.cols() != cols) {
      throw ShapeError("layer_norm: gain/bias must be [1 x " + std::to_string(cols) + "], got " +
                       vg.shape_str() + " and " + vb.shape_str());
    }
    int rows = va.rows();
    Tensor<T> out({rows, cols});
    auto inv_std = std::make_shared<std::vector<T>>(rows);
    auto normed = std::make_shared<Tensor<T>>(std::vector<int>{rows, cols});
    for (int r = 0; r < rows; ++r) {
      T mean = 0;
      for (int c = 0; c < cols; ++c) mean += va(r, c);
      mean /= T(cols);
      T var = 0;
      for (int c = 0; c < cols; ++c) {
        T d = va(r, c) - mean;
        var += d * d;
      }
      var /= T(cols);
      T inv = T(1) / std::sqrt(var + eps);
      (*inv_std)[r] = inv;
      for (int c = 0; c < cols; ++c) {
        T xhat = (va(r, c) - mean) * inv;
        (*normed)(r, c) = xhat;
        out(r, c) = vg[c] * xhat + vb[c];
      }
    }
    return push(std::move(out), [a, gain, bias, inv_std, normed](Tape& t, const Node& n) {
      const Tensor<T>& vg = t.value_ref(gain.id);
      Tensor<T>& ga = t.ensure_grad(a.id);
      Tensor<T>& gg = t.ensure_grad(gain.id);
      Tensor<T>& gb = t.ensure_grad(bias.id);
      int rows = n.grad.rows(), cols = n.grad.cols();
      for (int r = 0; r < rows; ++r) {
        T inv = (*inv_std)[r];
        T sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (int c = 0; c < cols; ++c) {
          T dxhat = n.grad(r, c) * vg[c];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * (*normed)(r, c);
          gg[c] += n.grad(r, c) * (*normed)(r, c);
          gb[c] += n.grad(r, c);
        }
        for (int c = 0; c < cols; ++c) {
          T dxhat = n.grad(r, c) * vg[c];
          ga(r, c) += inv * (dxhat - (sum_dxhat + (*normed)(r, c) * sum_dxhat_xhat) / T(cols));
        }
      }
    });
  }

  // Multi-head scaled dot-product attention over already-projected q/k/v.
  // Head h uses columns [h*dh, (h+1)*dh). Fully masked query rows produce
  // zero output rows.
  Var attention(Var q, Var k, Var v, const AttentionSpec& spec) {
    const Tensor<T>&vq = value_ref(q.id), &vk = value_ref(k.id), &vv = value_ref(v.id);
    int d = vq.cols();
    if (vk.cols() != d || vv.cols() != d || vk.rows() != vv.rows()) {
      throw ShapeError("attention: shape mismatch q " + vq.shape_str() + ", k " + vk.shape_str() +
                       ", v " + vv.shape_str());
    }
    if (spec.num_heads <= 0 || d % spec.num_heads != 0) {
      throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " +
                       std::to_string(spec.num_heads) + " heads");
    }
    if (!spec.kv_valid.empty() && static_cast<int>(spec.kv_valid.size()) != vk.rows()) {
      throw ShapeError("attention: kv_valid size " + std::to_string(spec.kv_valid.size()) +
                       " vs kv rows " + std::to_string(vk.rows()));
    }
    std::vector<AttnSegment> segs = spec.segments;
    if (segs.empty()) segs.push_back({0, vq.rows(), 0, vk.rows()});
    for (const AttnSegment& s : segs) {
      if (s.q_begin < 0 || s.q_begin + s.q_len > vq.rows() || s.kv_begin < 0 ||
          s.kv_begin + s.kv_len > vk.rows() || s.q_len <= 0 || s.kv_len <= 0) {
        throw ShapeError("attention: segment outside q " + vq.shape_str() + " / kv " +
                         vk.shape_str());
      }
      if (spec.causal && s.q_len != s.kv_len) {
        throw ShapeError("attention: causal segment needs aligned rows");
      }
    }
    int heads = spec.num_heads;
    int dh = d / heads;
    T scale = T(1) / std::sqrt(T(dh));
    Tensor<T> out({vq.rows(), d});
    // probs[(seg * heads) + h] is [q_len x kv_len]
    auto probs = std::make_shared<std::vector<Tensor<T>>>();
    probs->reserve(segs.size() * heads);
    for (const AttnSegment& s : segs) {
      for (int h = 0; h < heads; ++h) {
        Tensor<T> p({s.q_len, s.kv_len});
        auto qb = mat_view(vq).block(s.q_begin, h * dh, s.q_len, dh);
        auto kb = mat_view(vk).block(s.kv_begin, h * dh, s.kv_len, dh);
        auto vb = mat_view(vv).block(s.kv_begin, h * dh, s.kv_len, dh);
        mat_view(p).noalias() = qb * kb.transpose() * scale;
        for (int i = 0; i < s.q_len; ++i) {
          T* row = &p(i, 0);
          bool any = false;
          T mx = -std::numeric_limits<T>::infinity();
          for (int j = 0; j < s.kv_len; ++j) {
            bool allowed = (!spec.causal || j <= i) &&
                           (spec.kv_valid.empty() || spec.kv_valid[s.kv_begin + j]);
            if (!allowed) {
              row[j] = -std::numeric_limits<T>::infinity();
            } else {
              any = true;
              mx = std::max(mx, row[j]);
            }
          }
          if (!any) {
            std::fill(row, row + s.kv_len, T(0));
            continue;
          }
          T total = 0;
          for (int j = 0; j < s.kv_len; ++j) {
            row[j] = std::isinf(row[j]) ? T(0) : std::exp(row[j] - mx);
            total += row[j];
          }
          T inv = T(1) / total;
          for (int j = 0; j < s.kv_len; ++j) row[j] *= inv;
        }
        mat_view(out).block(s.q_begin, h * dh, s.q_len, dh).noalias() = mat_view(p) * vb;
        probs->push_back(std::move(p));
      }
    }
    auto segs_p = std::make_shared<std::vector<AttnSegment>>(std::move(segs));
    Var node = push(std::move(out), [q, k, v, heads, dh, scale, segs_p, probs](Tape& t, const Node& n) {
      const Tensor<T>&vq = t.value_ref(q.id), &vk = t.value_ref(k.id), &vv = t.value_ref(v.id);
      Tensor<T>& gq = t.ensure_grad(q.id);
      Tensor<T>& gk = t.ensure_grad(k.id);
      Tensor<T>& gv = t.ensure_grad(v.id);
      for (size_t si = 0; si < segs_p->size(); ++si) {
        const AttnSegment& s = (*segs_p)[si];
        for (int h = 0; h < heads; ++h) {
          const Tensor<T>& p = (*probs)[si * heads + h];
          auto qb = mat_view(vq).block(s.q_begin, h * dh, s.q_len, dh);
          auto kb = mat_view(vk).block(s.kv_begin, h * dh, s.kv_len, dh);
          auto vb = mat_view(vv).block(s.kv_begin, h * dh, s.kv_len, dh);
          auto go = mat_view(n.grad).block(s.q_begin, h * dh, s.q_len, dh);
          EigenRowMat<T> dp = go * vb.transpose();                      // [q_len x kv_len]
          mat_view(gv).block(s.kv_begin, h * dh, s.kv_len, dh).noalias() +=
              mat_view(p).transpose() * go;
          // softmax backward per row
          EigenRowMat<T> ds(s.q_len, s.kv_len);
          for (int i = 0; i < s.q_len; ++i) {
            T dot = 0;
            for (int j = 0; j < s.kv_len; ++j) dot += dp(i, j) * p(i, j);
            for (int j = 0; j < s.kv_len; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot);
          }
          mat_view(gq).block(s.q_begin, h * dh, s.q_len, dh).noalias() += ds * kb * scale;
          mat_view(gk).block(s.kv_begin, h * dh, s.kv_len, dh).noalias() +=
              ds.transpose() * qb * scale;
        }
      }
    });
    attn_probs_[node.id] = probs;
    return node;
  }

  // Post-softmax attention weights of an attention node, per (segment, head).
  const std::vector<Tensor<T>>& attention_probs(Var attn_node) const {
    auto it = attn_probs_.find(attn_node.id);
    if (it == attn_probs_.end()) throw ShapeError("attention_probs: not an attention node");
    return *it->second;
  }

  // ---- backward ----

  void backward(Var loss) {
    const Tensor<T>& lv = value_ref(loss.id);
    if (!lv.is_scalar()) {
      throw ShapeError("backward: loss must be scalar, got " + lv.shape_str());
    }
    for (Node& n : nodes_) n.has_grad = false;
    ensure_grad(loss.id)[0] = T(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, n);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;  // set for parameter leaves
    Tensor<T> grad;
    bool has_grad = false;
    int param_index = -1;
    std::function<void(Tape&, const Node&)> backward;
  };

  const Tensor<T>& value_ref(int id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }

  Tensor<T>& ensure_grad(int id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      const Tensor<T>& v = value_ref(id);
      if (!n.grad.same_shape(v)) {
        n.grad = Tensor<T>::zeros(v.shape());
      } else {
        std::fill(n.grad.vec().begin(), n.grad.vec().end(), T(0));
      }
      n.has_grad = true;
    }
    return n.grad;
  }

  void accumulate(Var v, const Tensor<T>& g) {
    Tensor<T>& gv = ensure_grad(v.id);
    for (int64_t i = 0; i < g.numel(); ++i) gv[i] += g[i];
  }

  Var push(Tensor<T> value, std::function<void(Tape&, const Node&)> backward, int param_index = -1,
           std::vector<int> unused = {}, const Tensor<T>* external = nullptr) {
    (void)unused;
    if (!external) check_finite(value, "op result");
    Node n;
    n.value = std::move(value);
    n.external = external;
    n.param_index = param_index;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  static void check_finite(const Tensor<T>& t, const char* what) {
    if (!t.all_finite()) {
      throw NumericError(std::string(what) + ": non-finite value in tensor " + t.shape_str());
    }
  }

  static void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!a.same_shape(b)) {
      throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                       b.shape_str());
    }
  }

  static void softmax_row_inplace(T* row, int n) {
    T mx = row[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, row[i]);
    T total = 0;
    for (int i = 0; i < n; ++i) {
      row[i] = std::exp(row[i] - mx);
      total += row[i];
    }
    T inv = T(1) / total;
    for (int i = 0; i < n; ++i) row[i] *= inv;
  }

  std::vector<Node> nodes_;
  std::unordered_map<int, int> param_nodes_;
  std::unordered_map<int, std::shared_ptr<std::vector<Tensor<T>>>> attn_probs_;
};

}  // namespace mgfid
