#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "fd_check.hpp"
#include "mgfid/adam.hpp"
#include "mgfid/rng.hpp"
#include "mgfid/tape.hpp"
#include "mgfid/tensor.hpp"

using namespace mgfid;
using mgfid::testing::finite_difference_grad;
using mgfid::testing::grads_close;

namespace {

TensorD random_tensor(Rng* rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
  TensorD t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng->uniform(lo, hi);
  return t;
}

// Scalarizes an op output with fixed random weights so FD can check full
// Jacobian information through one scalar.
Var weighted_sum(Tape<double>& tape, Var out, Rng* rng) {
  TensorD w(tape.value(out).shape());
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = rng->uniform(-1, 1);
  return tape.sum(tape.mul(out, tape.input(std::move(w))));
}

// Builds loss(inputs) via `build`, checks tape gradients of every input
// against central differences.
void check_op(
    const std::vector<std::vector<int>>& shapes,
    const std::function<Var(Tape<double>&, const std::vector<Var>&)>& build, uint64_t seed,
    double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::vector<TensorD> inputs;
  int64_t total = 0;
  for (const auto& s : shapes) {
    inputs.push_back(random_tensor(&rng, s, lo, hi));
    total += inputs.back().numel();
  }
  auto eval = [&](const std::vector<double>& flat) {
    Tape<double> tape;
    std::vector<Var> vars;
    int64_t at = 0;
    for (const auto& proto : inputs) {
      TensorD t(proto.shape());
      for (int64_t i = 0; i < t.numel(); ++i) t[i] = flat[at++];
      vars.push_back(tape.input(std::move(t)));
    }
    return tape.value(build(tape, vars))[0];
  };
  std::vector<double> flat;
  flat.reserve(total);
  for (const auto& t : inputs) flat.insert(flat.end(), t.vec().begin(), t.vec().end());

  Tape<double> tape;
  std::vector<Var> vars;
  for (auto& t : inputs) vars.push_back(tape.input(t));
  Var loss = build(tape, vars);
  tape.backward(loss);
  std::vector<double> analytic;
  for (Var v : vars) {
    if (tape.has_grad(v)) {
      const TensorD& g = tape.grad(v);
      analytic.insert(analytic.end(), g.vec().begin(), g.vec().end());
    } else {
      analytic.insert(analytic.end(), tape.value(v).numel(), 0.0);
    }
  }
  std::vector<double> numeric = finite_difference_grad(eval, flat);
  CAPTURE(mgfid::testing::max_rel_err(analytic, numeric));
  CHECK(grads_close(analytic, numeric));
}

}  // namespace

TEST_SUITE_BEGIN("numerics");

TEST_CASE("tensor shape and data length must agree") {
  CHECK_THROWS_AS(TensorD({2, 3}, {1.0, 2.0}), ShapeError);
  CHECK_THROWS_AS(TensorD({0, 3}), ShapeError);
  TensorD t({2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.all_finite());
}

TEST_CASE("rng determinism and uniform_int range") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) {
    CHECK(a.next_u64() == b.next_u64());
  }
  Rng r(7);
  for (int i = 0; i < 1000; ++i) {
    uint64_t v = r.uniform_int(13);
    CHECK(v < 13);
  }
  // fork independence: different salts give different streams
  Rng base(5);
  CHECK(base.fork(1).next_u64() != base.fork(2).next_u64());
}

TEST_CASE("softmax rows: symmetry, positivity, normalization") {
  // uniform logits -> uniform probabilities
  Tape<double> tape;
  Var x = tape.input(TensorD::row({0, 0, 0, 0}));
  const TensorD& p = tape.value(tape.softmax_rows(x));
  for (int i = 0; i < 4; ++i) CHECK(p[i] == doctest::Approx(0.25).epsilon(1e-12));

  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tape<double> t2;
    TensorD logits = random_tensor(&rng, {3, 7}, -30, 30);
    const TensorD& sm = t2.value(t2.softmax_rows(t2.input(logits)));
    for (int r = 0; r < 3; ++r) {
      double total = 0;
      for (int c = 0; c < 7; ++c) {
        CHECK(sm(r, c) >= 0.0);
        total += sm(r, c);
      }
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("elementwise max over a set of vectors") {
  Tape<double> tape;
  Var a = tape.input(TensorD::row({1, 3}));
  Var b = tape.input(TensorD::row({2, 2}));
  const TensorD& m = tape.value(tape.max_elem({a, b}));
  CHECK(m[0] == 2.0);
  CHECK(m[1] == 3.0);
}

TEST_CASE("mean over a row range") {
  Tape<double> tape;
  Var x = tape.input(TensorD({3, 2}, {0, 0, 2, 4, 4, 0}));
  const TensorD& m = tape.value(tape.mean_rows(x, 1, 2));
  CHECK(m[0] == 3.0);
  CHECK(m[1] == 2.0);
  CHECK_THROWS_AS(tape.mean_rows(x, 2, 1), ShapeError);
  CHECK_THROWS_AS(tape.mean_rows(x, 0, 3), ShapeError);
}

TEST_CASE("concatenation then slicing recovers operands bit-exactly") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tape<double> tape;
    TensorD a = random_tensor(&rng, {2, 5});
    TensorD b = random_tensor(&rng, {3, 5});
    TensorD c = random_tensor(&rng, {1, 5});
    Var cat = tape.concat_rows({tape.input(a), tape.input(b), tape.input(c)});
    const TensorD& sa = tape.value(tape.slice_rows(cat, 0, 1));
    const TensorD& sb = tape.value(tape.slice_rows(cat, 2, 4));
    const TensorD& sc = tape.value(tape.slice_rows(cat, 5, 5));
    CHECK(sa.vec() == a.vec());
    CHECK(sb.vec() == b.vec());
    CHECK(sc.vec() == c.vec());
  }
}

TEST_CASE("shape mismatches are rejected with both shapes named") {
  Tape<double> tape;
  Var a = tape.input(TensorD({2, 3}));
  Var b = tape.input(TensorD({4, 5}));
  try {
    tape.matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2 x 3]") != std::string::npos);
    CHECK(msg.find("[4 x 5]") != std::string::npos);
  }
  CHECK_THROWS_AS(tape.add(a, b), ShapeError);
}

TEST_CASE("non-finite op results are rejected") {
  Tape<double> tape;
  Var zero = tape.input(TensorD::row({0.0, 1.0}));
  CHECK_THROWS_AS(tape.log(zero), NumericError);  // log 0 -> -inf
}

TEST_CASE("simple analytic gradient: sum of squares") {
  Tape<double> tape;
  Var x = tape.input(TensorD::row({1, 2}));
  Var loss = tape.sum(tape.mul(x, x));
  tape.backward(loss);
  const TensorD& g = tape.grad(x);
  CHECK(g[0] == doctest::Approx(2.0));
  CHECK(g[1] == doctest::Approx(4.0));
}

TEST_CASE("softmax cross-entropy gradient is p - onehot") {
  Tape<double> tape;
  Var logits = tape.input(TensorD::row({0, 0, 0, 0}));
  Var lp = tape.log(tape.softmax_rows(logits));
  Var picked = tape.rows_pick(lp, {2});
  Var loss = tape.neg(tape.sum(picked));
  tape.backward(loss);
  const TensorD& g = tape.grad(logits);
  for (int j = 0; j < 4; ++j) {
    double expected = 0.25 - (j == 2 ? 1.0 : 0.0);
    CHECK(g[j] == doctest::Approx(expected).epsilon(1e-10));
  }
}

TEST_CASE("backward is repeatable on the same forward pass") {
  Rng rng(19);
  Tape<double> tape;
  Var x = tape.input(random_tensor(&rng, {3, 4}));
  Var w = tape.input(random_tensor(&rng, {4, 2}));
  Var loss = tape.sum(tape.softmax_rows(tape.matmul(x, w)));
  tape.backward(loss);
  std::vector<double> first = tape.grad(x).vec();
  tape.backward(loss);
  CHECK(tape.grad(x).vec() == first);
}

TEST_CASE("unreachable parameters get zero gradients") {
  ParamStore<double> params;
  Rng rng(2);
  int used = params.add("used", random_tensor(&rng, {2, 2}));
  int unused = params.add("unused", random_tensor(&rng, {3, 3}));
  Tape<double> tape;
  Var w = tape.param(&params.value(used), used);
  Var loss = tape.sum(tape.mul(w, w));
  auto grads = gradient(tape, loss, params);
  CHECK(grads.size() == 2);
  CHECK(grads[unused].numel() == 9);
  for (int64_t i = 0; i < 9; ++i) CHECK(grads[unused][i] == 0.0);
  for (int64_t i = 0; i < 4; ++i) {
    CHECK(grads[used][i] == doctest::Approx(2.0 * params.value(used)[i]));
  }
}

TEST_CASE("backward rejects non-scalar loss") {
  Tape<double> tape;
  Var x = tape.input(TensorD({2, 2}));
  CHECK_THROWS_AS(tape.backward(x), ShapeError);
}

// ---- finite-difference checks, one per differentiable primitive ----

TEST_CASE("fd: matmul") {
  check_op({{3, 4}, {4, 2}},
           [](Tape<double>& t, const std::vector<Var>& v) {
             Rng w(100);
             return weighted_sum(t, t.matmul(v[0], v[1]), &w);
           },
           1001);
}

TEST_CASE("fd: add / mul / affine") {
  check_op({{2, 3}, {2, 3}},
           [](Tape<double>& t, const std::vector<Var>& v) {
             Rng w(101);
             return weighted_sum(t, t.add(v[0], t.affine(t.mul(v[0], v[1]), 0.7, -0.2)), &w);
           },
           1002);
}

TEST_CASE("fd: log and exp") {
  check_op({{2, 4}},
           [](Tape<double>& t, const std::vector<Var>& v) {
             Rng w(102);
             return weighted_sum(t, t.log(t.exp(v[0])), &w);
           },
           1003);
  check_op({{2, 4}},
           [](Tape<double>& t, const std::vector<Var>& v) {
             Rng w(103);
             return weighted_sum(t, t.log(v[0]), &w);
           },
           1004, 0.5, 2.0);
}

TEST_CASE("fd: pow") {
  for (double p : {0.0, 1.0, 2.0, 0.5, 3.0}) {
    check_op({{2, 3}},
             [p](Tape<double>& t, const std::vector<Var>& v) {
               Rng w(104);
               return weighted_sum(t, t.pow(v[0], p), &w);
             },
             1005 + static_cast<uint64_t>(p * 10), 0.2, 1.5);
  }
}

TEST_CASE("fd: relu and softplus") {
  // keep inputs away from the relu kink
  check_op({{3, 3}},
           [](Tape<double>& t, const std::vector<Var>& v) {
             Rng w(105);
             return weighted_sum(t, t.relu(t.affine(v[0], 1.0, 0.3)), &w);
           },
           1006, 0.1, 1.0);
  check_op({{3, 3}},
           [](Tape<double>& t, const std::vector<Var>& v) {
             Rng w(106);
             return weighted_sum(t, t.softplus(v[0]), &w);
           },
           1007, -5.0, 5.0);
}

TEST_CASE("fd: reductions and rearrangement") {
  check_op({{4, 3}},
           [](Tape<double>& t, const std::vector<Var>& v) {
             Rng w(107);
             return weighted_sum(t, t.mean_rows(v[0], 1, 3), &w);
           },
           1008);
  check_op({{4, 3}},
           [](Tape<double>& t, const std::vector<Var>& v) {
             Rng w(108);
             return weighted_sum(t, t.slice_rows(v[0], 1, 2), &w);
           },
           1009);
  check_op({{2, 3}, {3, 3}},
           [](Tape<double>& t, const std::vector<Var>& v) {
             Rng w(109);
             return weighted_sum(t, t.concat_rows({v[0], v[1]}), &w);
           },
           1010);
  check_op({{3, 5}},
           [](Tape<double>& t, const std::vector<Var>& v) {
             Rng w(110);
             return weighted_sum(t, t.transpose(v[0]), &w);
           },
           1011);
  check_op({{3, 4}},
           [](Tape<double>& t, const std::vector<Var>& v) {
             Rng w(111);
             return weighted_sum(t, t.rows_pick(v[0], {2, 0, 3}), &w);
           },
           1012);
  check_op({{2, 4}, {1, 4}},
           [](Tape<double>& t, const std::vector<Var>& v) {
             Rng w(112);
             return weighted_sum(t, t.add_row(v[0], 1, v[1]), &w);
           },
           1013);
}

TEST_CASE("fd: max_elem routes gradient to the arg max") {
  // inputs drawn from disjoint offsets so no near-ties break the FD check
  Rng rng(113);
  Tape<double> tape;
  TensorD a = random_tensor(&rng, {1, 6}, -1.0, -0.2);
  TensorD b = random_tensor(&rng, {1, 6}, 0.2, 1.0);
  check_op({{1, 6}, {1, 6}},
           [](Tape<double>& t, const std::vector<Var>& v) {
             Rng w(114);
             return weighted_sum(t, t.max_elem({v[0], v[1]}), &w);
           },
           1014);
}

TEST_CASE("fd: softmax rows") {
  check_op({{3, 5}},
           [](Tape<double>& t, const std::vector<Var>& v) {
             Rng w(115);
             return weighted_sum(t, t.softmax_rows(v[0]), &w);
           },
           1015, -2.0, 2.0);
}

TEST_CASE("fd: embedding lookup") {
  check_op({{6, 3}},
           [](Tape<double>& t, const std::vector<Var>& v) {
             Rng w(116);
             return weighted_sum(t, t.embed({1, 4, 1, 0}, v[0]), &w);
           },
           1016);
}

TEST_CASE("fd: layer norm") {
  check_op({{3, 6}, {1, 6}, {1, 6}},
           [](Tape<double>& t, const std::vector<Var>& v) {
             Rng w(117);
             return weighted_sum(t, t.layer_norm(v[0], v[1], v[2]), &w);
           },
           1017);
}

TEST_CASE("fd: attention, plain and masked") {
  AttentionSpec plain;
  plain.num_heads = 2;
  check_op({{3, 8}, {5, 8}, {5, 8}},
           [plain](Tape<double>& t, const std::vector<Var>& v) {
             Rng w(118);
             return weighted_sum(t, t.attention(v[0], v[1], v[2], plain), &w);
           },
           1018);

  AttentionSpec causal;
  causal.num_heads = 2;
  causal.causal = true;
  check_op({{4, 8}, {4, 8}, {4, 8}},
           [causal](Tape<double>& t, const std::vector<Var>& v) {
             Rng w(119);
             return weighted_sum(t, t.attention(v[0], v[1], v[2], causal), &w);
           },
           1019);

  AttentionSpec segmented;
  segmented.num_heads = 2;
  segmented.segments = {{0, 2, 0, 3}, {2, 2, 3, 3}};
  segmented.kv_valid = {1, 1, 0, 1, 1, 1};
  check_op({{4, 8}, {6, 8}, {6, 8}},
           [segmented](Tape<double>& t, const std::vector<Var>& v) {
             Rng w(120);
             return weighted_sum(t, t.attention(v[0], v[1], v[2], segmented), &w);
           },
           1020);
}

TEST_CASE("fd: random 3-layer composition at d=4") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    check_op({{4, 4}, {4, 4}, {1, 4}, {1, 4}, {4, 4}},
             [](Tape<double>& t, const std::vector<Var>& v) {
               Var x = t.relu(t.matmul(v[0], v[1]));
               x = t.layer_norm(x, v[2], v[3]);
               x = t.softmax_rows(t.matmul(x, v[4]));
               Rng w(121);
               return weighted_sum(t, x, &w);
             },
             2000 + seed);
  }
}

// ---- adam ----

TEST_CASE("adam: zero gradients leave parameters unchanged, moments decay") {
  ParamStore<double> params;
  Rng rng(31);
  params.add("w", random_tensor(&rng, {2, 3}));
  std::vector<double> before = params.value(0).vec();
  AdamState<double> adam(params, {});
  std::vector<TensorD> zero{TensorD::zeros({2, 3})};
  for (int i = 0; i < 5; ++i) adam.step(params, zero);
  CHECK(params.value(0).vec() == before);
  CHECK(adam.step_count() == 5);
  for (int64_t i = 0; i < 6; ++i) {
    CHECK(adam.first_moment(0)[i] == 0.0);
    CHECK(adam.second_moment(0)[i] == 0.0);
  }
}

TEST_CASE("adam: first-step update magnitude is about the learning rate") {
  // bias-corrected at t=1: update = lr * g / (|g| + eps) per coordinate
  ParamStore<double> params;
  params.add("w", TensorD::zeros({1, 3}));
  AdamConfig cfg;
  cfg.lr = 1e-3;
  AdamState<double> adam(params, cfg);
  std::vector<TensorD> grads{TensorD({1, 3}, {0.5, -2.0, 0.01})};
  adam.step(params, grads);
  for (int64_t i = 0; i < 3; ++i) {
    double update = params.value(0)[i];
    double g = grads[0][i];
    double expected = -cfg.lr * g / (std::abs(g) + cfg.eps);
    CHECK(update == doctest::Approx(expected).epsilon(1e-9));
    CHECK(std::abs(update) == doctest::Approx(cfg.lr).epsilon(1e-5));
  }
}

TEST_CASE("adam: identical runs from the same seed are bitwise identical") {
  auto run = [] {
    ParamStore<double> params;
    Rng rng(77);
    params.add("w", random_tensor(&rng, {4, 4}));
    AdamState<double> adam(params, {});
    Rng grad_rng(78);
    for (int step = 0; step < 20; ++step) {
      std::vector<TensorD> grads{random_tensor(&grad_rng, {4, 4})};
      adam.step(params, grads);
    }
    return params.value(0).vec();
  };
  CHECK(run() == run());
}

TEST_CASE("adam: shape mismatch rejected") {
  ParamStore<double> params;
  params.add("w", TensorD::zeros({2, 2}));
  AdamState<double> adam(params, {});
  std::vector<TensorD> bad{TensorD::zeros({2, 3})};
  CHECK_THROWS_AS(adam.step(params, bad), ShapeError);
}

TEST_SUITE_END();
