#include "gradcheck_suite.hpp"

#include <algorithm>
#include <numeric>

#include "forge/ops.hpp"
#include "gradcheck.hpp"

namespace forge::testing {

namespace {

using ops::Conv2dParams;

// Entries at least `gap` apart, so no finite-difference step crosses a tie.
Tensor64 spread_tensor(Shape shape, std::mt19937_64& rng, double gap) {
  Tensor64 t(std::move(shape));
  std::vector<double> v(t.numel());
  std::iota(v.begin(), v.end(), 0.0);
  std::shuffle(v.begin(), v.end(), rng);
  const double mid = static_cast<double>(t.numel()) / 2.0;
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = (v[i] - mid + 0.5) * gap;
  return t;
}

void check(std::vector<GradCheckResult>& out, std::string name, const Tensor64& analytic, const Tensor64& x,
           const std::function<double(const Tensor64&)>& f) {
  out.push_back({std::move(name), max_relative_error(analytic, numeric_gradient(x, f))});
}

void check_matmul(std::vector<GradCheckResult>& out, std::mt19937_64& rng) {
  const Tensor64 a = random_tensor64({5, 4}, rng), b = random_tensor64({4, 3}, rng);
  const Tensor64 probe = random_tensor64({5, 3}, rng);
  const auto g = ops::matmul_backward(a, b, probe);
  check(out, "matmul/a", g.da, a, [&](const Tensor64& t) { return dot(ops::matmul(t, b), probe); });
  check(out, "matmul/b", g.db, b, [&](const Tensor64& t) { return dot(ops::matmul(a, t), probe); });
}

void check_dense(std::vector<GradCheckResult>& out, std::mt19937_64& rng) {
  const Tensor64 x = random_tensor64({3, 6}, rng), w = random_tensor64({4, 6}, rng), b = random_tensor64({4}, rng);
  const Tensor64 probe = random_tensor64({3, 4}, rng);
  const auto g = ops::dense_backward(x, w, probe);
  check(out, "dense/x", g.dx, x, [&](const Tensor64& t) { return dot(ops::dense(t, w, b), probe); });
  check(out, "dense/w", g.dw, w, [&](const Tensor64& t) { return dot(ops::dense(x, t, b), probe); });
  check(out, "dense/bias", g.dbias, b, [&](const Tensor64& t) { return dot(ops::dense(x, w, t), probe); });
}

void check_conv(std::vector<GradCheckResult>& out, std::mt19937_64& rng, const Conv2dParams& p,
                const std::string& tag) {
  const Tensor64 x = random_tensor64({2, 3, 7, 6}, rng), w = random_tensor64({4, 3, 3, 2}, rng);
  const Tensor64 b = random_tensor64({4}, rng);
  const Tensor64 y = ops::conv2d(x, w, b, p);
  const Tensor64 probe = random_tensor64(y.shape(), rng);
  const auto g = ops::conv2d_backward(x, w, probe, p);
  check(out, "conv2d" + tag + "/x", g.dx, x, [&](const Tensor64& t) { return dot(ops::conv2d(t, w, b, p), probe); });
  check(out, "conv2d" + tag + "/w", g.dw, w, [&](const Tensor64& t) { return dot(ops::conv2d(x, t, b, p), probe); });
  check(out, "conv2d" + tag + "/bias", g.dbias, b,
        [&](const Tensor64& t) { return dot(ops::conv2d(x, w, t, p), probe); });
}

void check_relu(std::vector<GradCheckResult>& out, std::mt19937_64& rng) {
  const Tensor64 x = spread_tensor({4, 5}, rng, 0.05);
  const Tensor64 probe = random_tensor64({4, 5}, rng);
  check(out, "relu/x", ops::relu_backward(x, probe), x, [&](const Tensor64& t) { return dot(ops::relu(t), probe); });
}

void check_maxpool(std::vector<GradCheckResult>& out, std::mt19937_64& rng, std::size_t window,
                   std::size_t stride) {
  const Tensor64 x = spread_tensor({2, 2, 6, 6}, rng, 1e-2);
  std::vector<std::uint32_t> argmax;
  const Tensor64 y = ops::maxpool2d(x, window, stride, &argmax);
  const Tensor64 probe = random_tensor64(y.shape(), rng);
  check(out, "maxpool" + std::to_string(window) + "s" + std::to_string(stride) + "/x",
        ops::maxpool2d_backward<double>(x.shape(), argmax, probe), x,
        [&](const Tensor64& t) { return dot(ops::maxpool2d(t, window, stride), probe); });
}

void check_cross_entropy(std::vector<GradCheckResult>& out, std::mt19937_64& rng) {
  const Tensor64 logits = random_tensor64({4, 7}, rng, -3.0, 3.0);
  std::uniform_int_distribution<int> label(0, 6);
  std::vector<int> y(4);
  for (auto& v : y) v = label(rng);
  check(out, "softmax_cross_entropy/logits", ops::softmax_cross_entropy(logits, y).dlogits, logits,
        [&](const Tensor64& t) { return ops::softmax_cross_entropy(t, y).loss; });
}

void check_penalty(std::vector<GradCheckResult>& out, std::mt19937_64& rng) {
  const Tensor64 w = random_tensor64({3, 5}, rng), z = random_tensor64({3, 5}, rng), u = random_tensor64({3, 5}, rng);
  const double rho = 0.37;
  check(out, "admm_penalty/w", ops::admm_penalty_backward(w, z, u, rho), w,
        [&](const Tensor64& t) { return ops::admm_penalty(t, z, u, rho); });
}

}  // namespace

std::vector<GradCheckResult> run_gradient_checks(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheckResult> out;
  check_matmul(out, rng);
  check_dense(out, rng);
  check_conv(out, rng, {1, 0}, "");
  check_conv(out, rng, {2, 1}, "[s2p1]");
  check_relu(out, rng);
  check_maxpool(out, rng, 2, 2);
  check_maxpool(out, rng, 3, 2);
  check_cross_entropy(out, rng);
  check_penalty(out, rng);
  return out;
}

}  // namespace forge::testing
