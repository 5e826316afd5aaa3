#pragma once

#include <cmath>
#include <string_view>

#include "forge/tensor.hpp"

namespace forge {

/// One momentum-SGD update, in place:
///   v <- momentum * v + g + weight_decay * w
///   w <- w - lr * v
/// Entries flagged in `frozen` are not updated and their velocity is reset.
template <typename T>
void sgd_step(BasicTensor<T>& w, const BasicTensor<T>& g, BasicTensor<T>& velocity, double lr,
              double momentum, double weight_decay, const Mask* frozen = nullptr,
              std::string_view name = "parameter") {
  if (!(lr > 0.0)) throw InputError("sgd_step: learning rate must be positive");
  w.require_same_shape(g, "sgd_step");
  w.require_same_shape(velocity, "sgd_step velocity");
  if (frozen && frozen->shape() != w.shape()) throw DimensionError("sgd_step: mask shape mismatch");
  for (T gi : g.data()) {
    if (!std::isfinite(static_cast<double>(gi))) {
      throw NumericError("non-finite gradient in " + std::string(name));
    }
  }
  const T mu = static_cast<T>(momentum), wd = static_cast<T>(weight_decay), step = static_cast<T>(lr);
  for (std::size_t i = 0; i < w.numel(); ++i) {
    if (frozen && (*frozen)[i]) {
      velocity[i] = T{0};
      continue;
    }
    velocity[i] = mu * velocity[i] + g[i] + wd * w[i];
    w[i] -= step * velocity[i];
  }
}

}  // namespace forge
