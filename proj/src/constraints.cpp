#include "forge/constraints.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace forge {

namespace {

template <class... Fs>
struct Overloaded : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

// Largest |k| of the grid in units of the scale.
long top_multiplier(int bit_width, bool include_zero) {
  if (bit_width == 1) return 1;
  const long half = 1L << (bit_width - 1);
  return include_zero ? half - 1 : 2 * half - 1;
}

void check_bit_width(int bit_width) {
  if (bit_width < 1 || bit_width > 8) {
    throw InputError("bit width must be in [1, 8], got " + std::to_string(bit_width));
  }
}

double snap_scale(double a) {
  int e = 0;
  const double m = std::frexp(a, &e);
  return std::ldexp(std::round(std::ldexp(m, 16)), e - 16);
}

// Squared error of rounding `vals` to the grid of unit `a`. Only the error
// value matters here, so midpoint ties need no special rule.
double grid_error(std::span<const float> vals, double a, int bit_width, bool include_zero) {
  const double top = static_cast<double>(top_multiplier(bit_width, include_zero));
  const bool odd = bit_width == 1 || !include_zero;
  double err = 0.0;
  for (float f : vals) {
    const double v = f / a;
    double k;
    if (odd) {
      // levels at odd integers in [-top, top]
      k = 2.0 * std::floor(v / 2.0) + 1.0;
      k = std::clamp(k, -top, top);
    } else {
      k = std::clamp(std::nearbyint(v), -top, top);
    }
    const double d = (v - k) * a;
    err += d * d;
  }
  return err;
}

}  // namespace

std::string describe(const ConstraintSpec& spec) {
  return std::visit(Overloaded{
                        [](const Cardinality& c) { return "cardinality(alpha=" + std::to_string(c.alpha) + ")"; },
                        [](const ColumnGroup& c) { return "columns(kept=" + std::to_string(c.kept_columns) + ")"; },
                        [](const LevelGrid& g) {
                          return "levels(bits=" + std::to_string(g.bit_width) +
                                 (g.include_zero ? ",zero" : ",nozero") + ")";
                        },
                    },
                    spec);
}

void Levels::validate() const {
  if (values.empty()) throw InputError("level set is empty");
  const double gap = spacing();
  for (std::size_t i = 1; i < values.size(); ++i) {
    const double d = double(values[i]) - double(values[i - 1]);
    if (!(d > 0.0)) throw InputError("levels must be strictly increasing");
    if (std::abs(d - gap) > 1e-9 * std::abs(gap)) throw InputError("levels must be equally spaced");
  }
}

bool Levels::contains(float v) const { return std::binary_search(values.begin(), values.end(), v); }

Levels levels_for_scale(double scale, int bit_width, bool include_zero) {
  check_bit_width(bit_width);
  if (!(scale > 0.0) || !std::isfinite(scale)) throw InputError("level scale must be positive and finite");
  Levels lv;
  lv.scale = scale;
  lv.bit_width = bit_width;
  lv.include_zero = bit_width == 1 ? false : include_zero;
  const long top = top_multiplier(bit_width, lv.include_zero);
  const long step = lv.include_zero ? 1 : 2;
  for (long k = -top; k <= top; k += step) lv.values.push_back(static_cast<float>(static_cast<double>(k) * scale));
  return lv;
}

Tensor project_cardinality(const Tensor& v, std::size_t alpha) {
  if (alpha < 1 || alpha > v.numel()) {
    throw InputError("cardinality alpha " + std::to_string(alpha) + " outside [1, " + std::to_string(v.numel()) +
                     "]");
  }
  if (alpha == v.numel()) return v;
  std::vector<float> mags(v.numel());
  for (std::size_t i = 0; i < v.numel(); ++i) mags[i] = std::abs(v[i]);
  std::vector<float> sorted = mags;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(alpha - 1), sorted.end(), std::greater<>());
  const float thresh = sorted[alpha - 1];
  std::size_t above = 0;
  for (float m : mags) above += m > thresh;
  std::size_t ties_left = alpha - above;

  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) {
    if (mags[i] > thresh) {
      out[i] = v[i];
    } else if (mags[i] == thresh && ties_left > 0) {
      out[i] = v[i];
      --ties_left;
    }
  }
  return out;
}

namespace {
std::pair<std::size_t, std::size_t> matrix_view(const Tensor& w) {
  if (w.rank() < 2) throw DimensionError("column grouping needs a tensor of rank >= 2, got " + to_string(w.shape()));
  return {w.dim(0), w.numel() / w.dim(0)};
}
}  // namespace

Tensor project_columns(const Tensor& w, std::size_t kept) {
  const auto [rows, cols] = matrix_view(w);
  if (kept < 1 || kept > cols) {
    throw InputError("kept columns " + std::to_string(kept) + " outside [1, " + std::to_string(cols) + "]");
  }
  std::vector<double> norm(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const double x = w[r * cols + c];
      norm[c] += x * x;
    }
  }
  std::vector<std::size_t> order(cols);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return norm[a] > norm[b]; });
  std::vector<bool> keep(cols, false);
  for (std::size_t i = 0; i < kept; ++i) keep[order[i]] = true;

  Tensor out(w.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      if (keep[c]) out[r * cols + c] = w[r * cols + c];
    }
  }
  return out;
}

std::size_t count_nonzero_columns(const Tensor& w) {
  const auto [rows, cols] = matrix_view(w);
  std::size_t n = 0;
  for (std::size_t c = 0; c < cols; ++c) {
    for (std::size_t r = 0; r < rows; ++r) {
      if (w[r * cols + c] != 0.0f) {
        ++n;
        break;
      }
    }
  }
  return n;
}

Tensor project_levels(const Tensor& v, const Levels& levels) {
  if (levels.values.empty()) throw InputError("cannot project onto an empty level set");
  const auto& q = levels.values;
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) {
    const float x = v[i];
    const auto it = std::lower_bound(q.begin(), q.end(), x);
    if (it == q.begin()) {
      out[i] = q.front();
      continue;
    }
    if (it == q.end()) {
      out[i] = q.back();
      continue;
    }
    const float hi = *it, lo = *(it - 1);
    const double d_hi = double(hi) - double(x), d_lo = double(x) - double(lo);
    if (d_lo < d_hi) {
      out[i] = lo;
    } else if (d_hi < d_lo) {
      out[i] = hi;
    } else {
      out[i] = std::abs(lo) < std::abs(hi) ? lo : hi;
    }
  }
  return out;
}

Levels make_levels(const Tensor& w, int bit_width, bool include_zero, const Mask* ignore) {
  check_bit_width(bit_width);
  if (ignore && ignore->shape() != w.shape()) throw DimensionError("make_levels: mask shape mismatch");
  std::vector<float> vals;
  vals.reserve(w.numel());
  float max_abs = 0.0f;
  for (std::size_t i = 0; i < w.numel(); ++i) {
    if (ignore && (*ignore)[i]) continue;
    vals.push_back(w[i]);
    max_abs = std::max(max_abs, std::abs(w[i]));
  }
  if (max_abs == 0.0f || !std::isfinite(max_abs)) {
    if (!std::isfinite(max_abs)) throw NumericError("make_levels: non-finite weight");
    Levels lv = levels_for_scale(1.0, bit_width, include_zero);
    lv.degenerate = true;
    return lv;
  }

  auto f = [&](double a) { return grid_error(vals, a, bit_width, include_zero); };
  const double lo = 1e-6 * max_abs, hi = max_abs;
  constexpr int kScan = 32;
  std::vector<double> grid(kScan + 1);
  int best = 0;
  double best_err = 0.0;
  for (int i = 0; i <= kScan; ++i) {
    grid[i] = lo + (hi - lo) * i / kScan;
    const double e = f(grid[i]);
    if (i == 0 || e < best_err) {
      best = i;
      best_err = e;
    }
  }
  double a = grid[std::max(best - 1, 0)], b = grid[std::min(best + 1, kScan)];
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - inv_phi * (b - a), d = a + inv_phi * (b - a);
  double fc = f(c), fd = f(d);
  for (int it = 0; it < 64; ++it) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = f(d);
    }
  }
  double scale = 0.5 * (a + b);
  if (best_err < f(scale)) scale = grid[best];
  return levels_for_scale(snap_scale(scale), bit_width, include_zero);
}

Projection project(const Tensor& v, const ConstraintSpec& spec, const Mask* pinned_zero) {
  if (pinned_zero && pinned_zero->shape() != v.shape()) throw DimensionError("project: mask shape mismatch");
  Tensor src = v;
  if (pinned_zero) {
    for (std::size_t i = 0; i < src.numel(); ++i) {
      if ((*pinned_zero)[i]) src[i] = 0.0f;
    }
  }
  return std::visit(Overloaded{
                        [&](const Cardinality& c) { return Projection{project_cardinality(src, c.alpha), {}}; },
                        [&](const ColumnGroup& c) { return Projection{project_columns(src, c.kept_columns), {}}; },
                        [&](const LevelGrid& g) {
                          Levels lv = make_levels(src, g.bit_width, g.include_zero, pinned_zero);
                          Tensor z = project_levels(src, lv);
                          if (pinned_zero) {
                            for (std::size_t i = 0; i < z.numel(); ++i) {
                              if ((*pinned_zero)[i]) z[i] = 0.0f;
                            }
                          }
                          return Projection{std::move(z), std::move(lv)};
                        },
                    },
                    spec);
}

std::optional<std::string> check_feasible(const Tensor& w, const ConstraintSpec& spec, const Levels* levels,
                                          const Mask* pinned_zero) {
  if (pinned_zero) {
    if (pinned_zero->shape() != w.shape()) return "mask shape " + to_string(pinned_zero->shape()) + " vs weight " + to_string(w.shape());
    for (std::size_t i = 0; i < w.numel(); ++i) {
      if ((*pinned_zero)[i] && w[i] != 0.0f) return "pinned entry " + std::to_string(i) + " is nonzero";
    }
  }
  return std::visit(
      Overloaded{
          [&](const Cardinality& c) -> std::optional<std::string> {
            const std::size_t nnz = count_nonzero(w);
            if (nnz > c.alpha) return std::to_string(nnz) + " nonzeros exceed alpha " + std::to_string(c.alpha);
            return std::nullopt;
          },
          [&](const ColumnGroup& c) -> std::optional<std::string> {
            const std::size_t n = count_nonzero_columns(w);
            if (n > c.kept_columns) {
              return std::to_string(n) + " nonzero columns exceed " + std::to_string(c.kept_columns);
            }
            return std::nullopt;
          },
          [&](const LevelGrid&) -> std::optional<std::string> {
            if (!levels) return std::string("no level table for a quantized layer");
            for (std::size_t i = 0; i < w.numel(); ++i) {
              if (pinned_zero && (*pinned_zero)[i]) continue;
              if (!levels->contains(w[i])) return "entry " + std::to_string(i) + " = " + std::to_string(w[i]) + " is off-grid";
            }
            return std::nullopt;
          },
      },
      spec);
}

}  // namespace forge
