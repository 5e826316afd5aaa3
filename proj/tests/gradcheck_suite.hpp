#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace forge::testing {

struct GradCheckResult {
  std::string name;  // "<op>/<input>"
  double max_rel_error = 0.0;
};

/// Analytic vs central-difference gradients (f64, h = 1e-5) for every
/// differentiable op, on random small shapes drawn from `seed`.
std::vector<GradCheckResult> run_gradient_checks(std::uint64_t seed);

}  // namespace forge::testing
