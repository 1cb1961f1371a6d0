#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "msfuse/nn.hpp"

namespace msfuse::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? m : INFINITY;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) { return max_abs_diff(a.values(), b.values()); }

// Weighted sum with fixed random weights, so every output entry matters.
inline Tensor probe(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor w = random_tensor(y.shape(), rng, -1.0, 1.0, false);
  return sum(mul(y, w));
}

/// Largest |a − n| / max(|a|, |n|, floor) over every entry of every input,
/// comparing backprop of f against central differences.
inline double fd_max_rel_error(std::vector<Tensor> inputs, const std::function<Tensor(const std::vector<Tensor>&)>& f,
                               double eps = 1e-5, double floor = 1e-6) {
  for (auto& t : inputs) t.zero_grad();
  f(inputs).backward();
  double worst = 0.0;
  for (auto& t : inputs) {
    const std::vector<double> analytic = t.grad();
    auto v = t.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double saved = v[i];
      double up, down;
      {
        NoGradGuard g;
        v[i] = saved + eps;
        up = f(inputs).item();
        v[i] = saved - eps;
        down = f(inputs).item();
      }
      v[i] = saved;
      const double numeric = (up - down) / (2 * eps);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace msfuse::testing
