#pragma once

#include <span>
#include <string>
#include <vector>

#include "mgfid/errors.hpp"
#include "mgfid/tape.hpp"
#include "mgfid/tensor.hpp"

namespace mgfid {

struct LossWeights {
  double lambda1 = 0.5;      // passage re-ranking weight
  double lambda2 = 1.0;      // sentence classification weight
  double focal_alpha = 0.95;
  double focal_gamma = 2.0;
  double tau = 0.05;         // pruning threshold (inference-time)
};

// -sum_t log p(y_t | y_<t, V), teacher forced. One logit row per target
// position; padding positions are the caller's to exclude.
template <typename T>
Var generation_loss(Tape<T>& tape, Var logits, std::span<const int> targets) {
  const Tensor<T>& lv = tape.value(logits);
  if (static_cast<int>(targets.size()) != lv.rows()) {
    throw ShapeError("generation_loss: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(lv.rows()) + " logit rows");
  }
  for (int t : targets) {
    if (t < 0 || t >= lv.cols()) {
      throw ShapeError("generation_loss: target id " + std::to_string(t) +
                       " outside vocab of " + std::to_string(lv.cols()));
    }
  }
  Var log_probs = tape.log(tape.softmax_rows(logits));
  Var picked = tape.rows_pick(log_probs, std::vector<int>(targets.begin(), targets.end()));
  return tape.neg(tape.sum(picked));
}

// -(1/|P|) sum_{pos in P} log p_pos over the probabilities of one question.
template <typename T>
Var listwise_passage_loss(Tape<T>& tape, Var probs, std::span<const int> positives) {
  const Tensor<T>& pv = tape.value(probs);
  if (pv.rows() != 1) {
    throw ShapeError("listwise_passage_loss: expected a probability row, got " + pv.shape_str());
  }
  if (positives.empty()) {
    throw ShapeError("listwise_passage_loss: empty positive set");
  }
  Var col = tape.transpose(probs);  // [K x 1]
  std::vector<Var> picked;
  picked.reserve(positives.size());
  for (int pos : positives) {
    if (pos < 0 || pos >= pv.cols()) {
      throw ShapeError("listwise_passage_loss: index " + std::to_string(pos) +
                       " out of range for " + std::to_string(pv.cols()) + " passages");
    }
    picked.push_back(tape.slice_rows(col, pos, pos));
  }
  Var gathered = picked.size() == 1 ? picked[0] : tape.concat_rows(std::span<const Var>(picked));
  return tape.scale(tape.neg(tape.sum(tape.log(gathered))),
                    T(1) / T(static_cast<int>(positives.size())));
}

// Mean sigmoid binary cross-entropy over per-passage logits (the pointwise
// ablation variant).
template <typename T>
Var pointwise_passage_loss(Tape<T>& tape, Var logits, std::span<const int> labels) {
  const Tensor<T>& lv = tape.value(logits);
  if (static_cast<int>(labels.size()) != lv.numel()) {
    throw ShapeError("pointwise_passage_loss: " + std::to_string(labels.size()) +
                     " labels for logits " + lv.shape_str());
  }
  Tensor<T> y(lv.shape());
  for (int64_t i = 0; i < y.numel(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) {
      throw ShapeError("pointwise_passage_loss: labels must be 0/1");
    }
    y[i] = T(labels[i]);
  }
  // bce(x, y) = softplus(x) - y * x
  Var per = tape.add(tape.softplus(logits), tape.neg(tape.mul(logits, tape.input(std::move(y)))));
  return tape.scale(tape.sum(per), T(1) / T(lv.numel()));
}

// Focal loss per sentence: -alpha_t (1 - p_t)^gamma log(p_t) with 2-class
// softmax p_t of the true class and alpha_t = alpha for positives,
// 1 - alpha for negatives. Returns an [N x 1] vector of losses.
template <typename T>
Var focal_loss(Tape<T>& tape, Var logits2, std::span<const int> labels, const LossWeights& w) {
  const Tensor<T>& lv = tape.value(logits2);
  if (lv.cols() != 2) {
    throw ShapeError("focal_loss: expected 2-class logits, got " + lv.shape_str());
  }
  if (static_cast<int>(labels.size()) != lv.rows()) {
    throw ShapeError("focal_loss: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(lv.rows()) + " sentences");
  }
  int n = lv.rows();
  Tensor<T> alpha_t({n, 1});
  std::vector<int> ys(labels.begin(), labels.end());
  for (int i = 0; i < n; ++i) {
    if (ys[i] != 0 && ys[i] != 1) throw ShapeError("focal_loss: labels must be 0/1");
    alpha_t[i] = T(ys[i] == 1 ? w.focal_alpha : 1.0 - w.focal_alpha);
  }
  Var pt = tape.rows_pick(tape.softmax_rows(logits2), ys);
  Var one_minus = tape.affine(pt, T(-1), T(1));
  Var mod = tape.pow(one_minus, T(w.focal_gamma));
  Var nll = tape.neg(tape.log(pt));
  return tape.mul(tape.mul(tape.input(std::move(alpha_t)), mod), nll);
}

template <typename T>
Var focal_loss_mean(Tape<T>& tape, Var logits2, std::span<const int> labels,
                    const LossWeights& w) {
  Var per = focal_loss(tape, logits2, labels, w);
  return tape.scale(tape.sum(per), T(1) / T(tape.value(per).rows()));
}

// L = L_gen + lambda1 * L_passage + lambda2 * L_sentence.
template <typename T>
Var combined_loss(Tape<T>& tape, Var l_gen, Var l_passage, Var l_sentence, const LossWeights& w) {
  Var total = l_gen;
  if (l_passage.valid()) total = tape.add(total, tape.scale(l_passage, T(w.lambda1)));
  if (l_sentence.valid()) total = tape.add(total, tape.scale(l_sentence, T(w.lambda2)));
  return total;
}

}  // namespace mgfid
