#pragma once

// Test-only central finite-difference gradient oracle. Kept independent of
// the tape: callers rebuild the forward value from a flat coordinate vector.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace mgfid::testing {

template <typename F>
std::vector<double> finite_difference_grad(F f, std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    double orig = x[i];
    x[i] = orig + h;
    double fp = f(x);
    x[i] = orig - h;
    double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Relative comparison with an absolute floor for near-zero entries.
inline bool grads_close(std::span<const double> analytic, std::span<const double> numeric,
                        double rel = 1e-4, double floor_ = 1e-6) {
  if (analytic.size() != numeric.size()) return false;
  for (size_t i = 0; i < analytic.size(); ++i) {
    double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor_});
    if (std::abs(analytic[i] - numeric[i]) > rel * denom) return false;
  }
  return true;
}

inline double max_rel_err(std::span<const double> analytic, std::span<const double> numeric,
                          double floor_ = 1e-6) {
  double worst = 0;
  for (size_t i = 0; i < analytic.size(); ++i) {
    double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor_});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

}  // namespace mgfid::testing
