#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "forge/tensor.hpp"

namespace forge {

/// At most `alpha` nonzero entries.
struct Cardinality {
  std::size_t alpha = 1;
  bool operator==(const Cardinality&) const = default;
};

/// At most `kept_columns` nonzero columns of the 2-D view (conv: F x C*kh*kw).
struct ColumnGroup {
  std::size_t kept_columns = 1;
  bool operator==(const ColumnGroup&) const = default;
};

/// Symmetric equal-spaced levels refit to the tensor at every projection.
/// bit_width 1 is always {-a, +a}.
struct LevelGrid {
  int bit_width = 1;
  bool include_zero = true;
  bool operator==(const LevelGrid&) const = default;
};

using ConstraintSpec = std::variant<Cardinality, ColumnGroup, LevelGrid>;

std::string describe(const ConstraintSpec& spec);

/// A concrete level set: values strictly increasing with equal gaps.
struct Levels {
  std::vector<float> values;
  double scale = 1.0;  // the unit a of the grid
  int bit_width = 1;
  bool include_zero = true;
  bool degenerate = false;  // fitted to an all-zero tensor; scale defaulted to 1

  double spacing() const { return values.size() < 2 ? 0.0 : double(values[1]) - double(values[0]); }
  /// Throws InputError when empty, unsorted, or unevenly spaced.
  void validate() const;
  bool contains(float v) const;
  bool operator==(const Levels&) const = default;
};

/// Grid for unit `scale`:
///   b = 1                 -> {-a, a}
///   b >= 2, include_zero  -> {k a : |k| <= 2^(b-1) - 1}
///   b >= 2, no zero       -> {(2k + 1) a : -2^(b-1) <= k < 2^(b-1)}  (2^b levels, gap 2a)
Levels levels_for_scale(double scale, int bit_width, bool include_zero);

/// Keeps the `alpha` largest-magnitude entries (ties: lower flat index wins).
Tensor project_cardinality(const Tensor& v, std::size_t alpha);

/// Keeps the `kept` columns of largest L2 norm (ties: lower column index wins).
Tensor project_columns(const Tensor& w, std::size_t kept);

/// Elementwise nearest level. A value exactly between two levels goes to the
/// one of smaller magnitude; between -a and +a (no zero level) it goes to +a.
Tensor project_levels(const Tensor& v, const Levels& levels);

/// Fits the grid unit minimizing ||w - project_levels(w)||_F. A coarse scan
/// brackets the minimum, then 64 golden-section iterations refine it. Only
/// entries not flagged in `ignore` take part. The unit is rounded to 16
/// significant bits so every level k*a is exact in float.
Levels make_levels(const Tensor& w, int bit_width, bool include_zero, const Mask* ignore = nullptr);

/// Result of projecting onto one ConstraintSpec.
struct Projection {
  Tensor value;
  std::optional<Levels> levels;  // set for LevelGrid
};

/// Euclidean projection onto the set of `spec`, with the entries flagged in
/// `pinned_zero` forced to zero (they belong to an earlier pruning step).
Projection project(const Tensor& v, const ConstraintSpec& spec, const Mask* pinned_zero = nullptr);

/// Number of nonzero columns of the 2-D view.
std::size_t count_nonzero_columns(const Tensor& w);

/// Empty when `w` satisfies `spec` exactly; otherwise a description of the
/// first violation. For LevelGrid, `levels` is required; pinned entries must be 0.
std::optional<std::string> check_feasible(const Tensor& w, const ConstraintSpec& spec, const Levels* levels,
                                          const Mask* pinned_zero = nullptr);

}  // namespace forge
