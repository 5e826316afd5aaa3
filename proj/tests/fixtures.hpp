#pragma once

#include <cstdint>

#include "forge/dataset.hpp"

namespace forge::testing {

/// The four XOR points, labels {0, 1, 1, 0}.
Dataset xor_dataset();

/// Three Gaussian blobs in 2-D, label = index % 3; separable by a small MLP.
Dataset blobs(std::size_t n, std::uint64_t seed);

/// Silences log_info for the lifetime of the object.
struct QuietLogs {
  QuietLogs();
  ~QuietLogs();
};

}  // namespace forge::testing
