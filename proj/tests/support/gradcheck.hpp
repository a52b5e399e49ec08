#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "forge/ops.hpp"

namespace forge::testing {

/// Below this magnitude a gradient counts as zero.
inline constexpr double kGradFloor = 1e-3;

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Tensor t(shape);
  for (auto& v : t.mutable_values()) v = static_cast<Real>(d(rng));
  return t;
}

/// Largest relative deviation between the backward pass of `f` and central
/// differences of `surrogate` (defaults to `f`). Both are reduced to a
/// scalar through a fixed random projection of their output. The relative
/// error of a tensor is max|diff| / max(max|grad|, kGradFloor).
inline double grad_error(std::vector<Tensor> inputs, const Fn& f, const Fn& surrogate, std::mt19937_64& rng,
                         double eps = 1e-6) {
  const Fn& g = surrogate ? surrogate : f;
  Tensor proj;
  auto scalar = [&](const Fn& fn, const std::vector<Tensor>& in) {
    Tensor out = fn(in);
    if (!proj.defined()) proj = random_tensor(out.shape(), rng);
    return ops::dot(out, proj);
  };
  for (auto& t : inputs) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  scalar(f, inputs).backward();

  double worst = 0;
  NoGradGuard guard;
  for (auto& t : inputs) {
    std::vector<Real> analytic(static_cast<std::size_t>(t.numel()), Real{0});
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    std::vector<double> numeric(analytic.size());
    auto v = t.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const Real keep = v[i];
      v[i] = keep + static_cast<Real>(eps);
      const double up = scalar(g, inputs).item();
      v[i] = keep - static_cast<Real>(eps);
      const double down = scalar(g, inputs).item();
      v[i] = keep;
      numeric[i] = (up - down) / (2 * eps);
    }
    double diff = 0, mag = 0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff = std::max(diff, std::abs(numeric[i] - analytic[i]));
      mag = std::max({mag, std::abs(numeric[i]), std::abs(static_cast<double>(analytic[i]))});
    }
    worst = std::max(worst, diff / std::max(mag, kGradFloor));
  }
  return worst;
}

}  // namespace forge::testing
