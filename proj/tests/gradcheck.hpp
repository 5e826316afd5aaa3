#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "forge/tensor.hpp"

namespace forge::testing {

inline Tensor64 random_tensor64(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor64 t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<float> d(lo, hi);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

/// Central differences of a scalar function of `x`, step h.
inline Tensor64 numeric_gradient(Tensor64 x, const std::function<double(const Tensor64&)>& f, double h = 1e-5) {
  Tensor64 g(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = f(x);
    x[i] = orig - h;
    const double down = f(x);
    x[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor). The floor keeps entries whose
/// true gradient is zero from dividing noise by noise.
inline double max_relative_error(const Tensor64& analytic, const Tensor64& numeric, double floor = 1e-6) {
  analytic.require_same_shape(numeric, "gradient check");
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.numel(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

/// <a, b> over all entries; used to turn a tensor output into a scalar probe.
inline double dot(const Tensor64& a, const Tensor64& b) {
  a.require_same_shape(b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace forge::testing
