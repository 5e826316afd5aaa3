#pragma once

#include <cstdint>
#include <random>

#include "forge/constraints.hpp"

namespace forge::testing {

/// Sum over entries of (a_i - b_i)^2, in index order.
double sq_dist(const Tensor& a, const Tensor& b);

/// Minimum squared distance from v to any tensor with exactly `alpha` entries
/// of v kept (the rest zeroed), by enumerating every support.
double cardinality_oracle_min(const Tensor& v, std::size_t alpha);

/// Same over column subsets of the 2-D view.
double columns_oracle_min(const Tensor& w, std::size_t kept);

/// Nearest level by scanning all levels; ties go to the smaller magnitude,
/// then to the larger value.
Tensor levels_oracle(const Tensor& v, const Levels& levels);

/// True when every entry of z is either 0 or the matching entry of v.
bool is_masked_copy(const Tensor& v, const Tensor& z);

/// Random small tensor. Half of the draws use a coarse value set so that
/// magnitude ties and exact level midpoints occur.
Tensor small_random_tensor(std::mt19937_64& rng, std::size_t max_numel, bool matrix);

struct OracleStats {
  std::size_t cases = 0;
  std::size_t cardinality_mismatch = 0;
  std::size_t columns_mismatch = 0;
  std::size_t levels_mismatch = 0;
};

/// `count` random tensors (numel <= 12), each checked against all three oracles.
OracleStats run_projection_oracles(std::uint64_t seed, std::size_t count);

}  // namespace forge::testing
