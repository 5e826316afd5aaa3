#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "forge/tensor.hpp"

// Differentiable primitives. Each forward has a matching *_backward that
// maps the upstream gradient to input gradients. Instantiated for float
// (training) and double (gradient checks).
namespace forge::ops {

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
struct MatmulGrads {
  BasicTensor<T> da;
  BasicTensor<T> db;
};

template <typename T>
MatmulGrads<T> matmul_backward(const BasicTensor<T>& a, const BasicTensor<T>& b,
                               const BasicTensor<T>& dout);

// y = x * w^T + bias, x: [B, in], w: [out, in], bias: [out].
template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias);

template <typename T>
struct LinearGrads {
  BasicTensor<T> dx;
  BasicTensor<T> dw;
  BasicTensor<T> dbias;
};

template <typename T>
LinearGrads<T> dense_backward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                              const BasicTensor<T>& dout);

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, const Conv2dParams& p);

// Cross-correlation. x: [B, C, H, W], w: [F, C, kh, kw], bias: [F] or empty.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias,
                      const Conv2dParams& p);

// dx is left empty when need_dx is false.
template <typename T>
LinearGrads<T> conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                               const BasicTensor<T>& dout, const Conv2dParams& p, bool need_dx = true);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& dout);

// Non-overlapping or strided max pooling. `argmax` receives, per output
// element, the flat input index it was taken from.
template <typename T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& x, std::size_t window, std::size_t stride,
                         std::vector<std::uint32_t>* argmax = nullptr);

template <typename T>
BasicTensor<T> maxpool2d_backward(const Shape& input_shape, std::span<const std::uint32_t> argmax,
                                  const BasicTensor<T>& dout);

template <typename T>
struct LossAndGrad {
  double loss = 0.0;
  BasicTensor<T> dlogits;
};

// Mean softmax cross-entropy over the batch; logits: [B, K].
template <typename T>
LossAndGrad<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels);

// (rho/2) * ||w - z + u||_F^2 and its gradient with respect to w.
template <typename T>
double admm_penalty(const BasicTensor<T>& w, const BasicTensor<T>& z, const BasicTensor<T>& u,
                    double rho);

template <typename T>
BasicTensor<T> admm_penalty_backward(const BasicTensor<T>& w, const BasicTensor<T>& z,
                                     const BasicTensor<T>& u, double rho);

}  // namespace forge::ops
