#include "fixtures.hpp"

#include <random>

#include "forge/train.hpp"

namespace forge::testing {

Dataset xor_dataset() {
  Dataset d;
  d.images = Tensor({4, 2}, std::vector<float>{0, 0, 0, 1, 1, 0, 1, 1});
  d.labels = {0, 1, 1, 0};
  d.classes = 2;
  d.split = "xor";
  return d;
}

Dataset blobs(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.4f);
  Dataset d;
  d.images = Tensor({n, 2});
  d.labels.resize(n);
  d.classes = 3;
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % 3);
    d.labels[i] = c;
    d.images.at(i, 0) = static_cast<float>(c) * 1.5f + noise(rng);
    d.images.at(i, 1) = (c == 1 ? 1.0f : -1.0f) + noise(rng);
  }
  return d;
}

QuietLogs::QuietLogs() { set_log_level(0); }
QuietLogs::~QuietLogs() { set_log_level(1); }

}  // namespace forge::testing
