#include "forge/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace forge {

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace forge

namespace forge::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
CMapMat<T> as_mat(const BasicTensor<T>& t, std::size_t rows, std::size_t cols) {
  return CMapMat<T>(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
MapMat<T> as_mat(BasicTensor<T>& t, std::size_t rows, std::size_t cols) {
  return MapMat<T>(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    throw DimensionError(std::string(what) + " expects rank " + std::to_string(rank) + ", got " +
                         to_string(s));
  }
}

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t filters, kh, kw;
  std::size_t out_h, out_w;
  std::size_t patch() const { return channels * kh * kw; }
  std::size_t pixels() const { return out_h * out_w; }
};

ConvGeometry conv_geometry(const Shape& x, const Shape& w, const Conv2dParams& p) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d kernel");
  if (x[1] != w[1]) {
    throw DimensionError("conv2d channel mismatch: input " + to_string(x) + ", kernel " + to_string(w));
  }
  if (p.stride == 0) throw DimensionError("conv2d stride must be positive");
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], 0, 0};
  g.out_h = conv_output_extent(g.height, g.kh, p);
  g.out_w = conv_output_extent(g.width, g.kw, p);
  return g;
}

// Column matrix for samples [b0, b0+nb), laid out [C*kh*kw, nb*OH*OW]: row
// (c, i, j) holds the input pixels seen by kernel tap (i, j) of channel c at
// every output position.
template <typename T>
void im2col(const T* src, const ConvGeometry& g, const Conv2dParams& p, std::size_t b0, std::size_t nb,
            std::vector<T>& cols) {
  const std::size_t px = g.pixels(), cols_n = nb * px;
  cols.resize(g.patch() * cols_n);
  if (p.padding > 0) std::fill(cols.begin(), cols.end(), T{0});
  const long pad = static_cast<long>(p.padding);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = cols.data() + ((c * g.kh + i) * g.kw + j) * cols_n;
        for (std::size_t b = 0; b < nb; ++b) {
          const T* plane = src + ((b0 + b) * g.channels + c) * g.height * g.width;
          T* dst = row + b * px;
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            const long ih = static_cast<long>(oh * p.stride + i) - pad;
            if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
            const T* line = plane + ih * g.width;
            T* out = dst + oh * g.out_w;
            if (p.stride == 1 && pad == 0) {
              const T* in = line + j;
              for (std::size_t ow = 0; ow < g.out_w; ++ow) out[ow] = in[ow];
              continue;
            }
            for (std::size_t ow = 0; ow < g.out_w; ++ow) {
              const long iw = static_cast<long>(ow * p.stride + j) - pad;
              if (iw >= 0 && iw < static_cast<long>(g.width)) out[ow] = line[iw];
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates column gradients back into dx.
template <typename T>
void col2im(const std::vector<T>& dcols, const ConvGeometry& g, const Conv2dParams& p, std::size_t b0,
            std::size_t nb, T* dst) {
  const std::size_t px = g.pixels(), cols_n = nb * px;
  const long pad = static_cast<long>(p.padding);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = dcols.data() + ((c * g.kh + i) * g.kw + j) * cols_n;
        for (std::size_t b = 0; b < nb; ++b) {
          T* plane = dst + ((b0 + b) * g.channels + c) * g.height * g.width;
          const T* src = row + b * px;
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            const long ih = static_cast<long>(oh * p.stride + i) - pad;
            if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
            T* line = plane + ih * g.width;
            const T* in = src + oh * g.out_w;
            if (p.stride == 1 && pad == 0) {
              T* out = line + j;
              for (std::size_t ow = 0; ow < g.out_w; ++ow) out[ow] += in[ow];
              continue;
            }
            for (std::size_t ow = 0; ow < g.out_w; ++ow) {
              const long iw = static_cast<long>(ow * p.stride + j) - pad;
              if (iw >= 0 && iw < static_cast<long>(g.width)) line[iw] += in[ow];
            }
          }
        }
      }
    }
  }
}

// Samples per im2col block, sized so the column matrix stays cache resident.
std::size_t conv_chunk(const ConvGeometry& g) {
  constexpr std::size_t kTargetElems = std::size_t{1} << 18;
  const std::size_t per_sample = std::max<std::size_t>(1, g.patch() * g.pixels());
  return std::clamp<std::size_t>(kTargetElems / per_sample, 1, g.batch);
}

}  // namespace

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank(a.shape(), 2, "matmul lhs");
  require_rank(b.shape(), 2, "matmul rhs");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul inner dimensions differ: " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  BasicTensor<T> out({a.dim(0), b.dim(1)});
  as_mat(out, a.dim(0), b.dim(1)).noalias() = as_mat(a, a.dim(0), a.dim(1)) * as_mat(b, b.dim(0), b.dim(1));
  return out;
}

template <typename T>
MatmulGrads<T> matmul_backward(const BasicTensor<T>& a, const BasicTensor<T>& b, const BasicTensor<T>& dout) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (dout.shape() != Shape{m, n}) throw DimensionError("matmul_backward: bad upstream shape");
  MatmulGrads<T> g{BasicTensor<T>({m, k}), BasicTensor<T>({k, n})};
  as_mat(g.da, m, k).noalias() = as_mat(dout, m, n) * as_mat(b, k, n).transpose();
  as_mat(g.db, k, n).noalias() = as_mat(a, m, k).transpose() * as_mat(dout, m, n);
  return g;
}

template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias) {
  require_rank(w.shape(), 2, "dense weight");
  const std::size_t out_f = w.dim(0), in_f = w.dim(1);
  if (x.rank() < 2 || x.numel() / x.dim(0) != in_f) {
    throw DimensionError("dense input " + to_string(x.shape()) + " does not match weight " +
                         to_string(w.shape()));
  }
  if (bias.numel() != out_f) throw DimensionError("dense bias size mismatch");
  const std::size_t batch = x.dim(0);
  BasicTensor<T> y({batch, out_f});
  auto ym = as_mat(y, batch, out_f);
  ym.noalias() = as_mat(x, batch, in_f) * as_mat(w, out_f, in_f).transpose();
  ym.rowwise() += as_mat(bias, 1, out_f).row(0);
  return y;
}

template <typename T>
LinearGrads<T> dense_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& dout) {
  const std::size_t out_f = w.dim(0), in_f = w.dim(1), batch = x.dim(0);
  if (dout.shape() != Shape{batch, out_f}) throw DimensionError("dense_backward: bad upstream shape");
  LinearGrads<T> g{BasicTensor<T>(x.shape()), BasicTensor<T>(w.shape()), BasicTensor<T>({out_f})};
  auto dy = as_mat(dout, batch, out_f);
  as_mat(g.dx, batch, in_f).noalias() = dy * as_mat(w, out_f, in_f);
  as_mat(g.dw, out_f, in_f).noalias() = dy.transpose() * as_mat(x, batch, in_f);
  as_mat(g.dbias, 1, out_f).row(0) = dy.colwise().sum();
  return g;
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, const Conv2dParams& p) {
  const std::size_t padded = in + 2 * p.padding;
  if (kernel > padded) {
    throw DimensionError("kernel extent " + std::to_string(kernel) + " exceeds padded input extent " +
                         std::to_string(padded));
  }
  return (padded - kernel) / p.stride + 1;
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias,
                      const Conv2dParams& p) {
  const ConvGeometry g = conv_geometry(x.shape(), w.shape(), p);
  if (!bias.empty() && bias.numel() != g.filters) throw DimensionError("conv2d bias size mismatch");
  const std::size_t px = g.pixels(), patch = g.patch(), chunk = conv_chunk(g);
  const auto wm = as_mat(w, g.filters, patch);
  std::vector<T> col;
  RowMat<T> prod;
  BasicTensor<T> out({g.batch, g.filters, g.out_h, g.out_w});
  T* dst = out.data().data();
  for (std::size_t b0 = 0; b0 < g.batch; b0 += chunk) {
    const std::size_t nb = std::min(chunk, g.batch - b0), cols_n = nb * px;
    im2col(x.data().data(), g, p, b0, nb, col);
    prod.resize(static_cast<Eigen::Index>(g.filters), static_cast<Eigen::Index>(cols_n));
    prod.noalias() = wm * CMapMat<T>(col.data(), patch, cols_n);
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t f = 0; f < g.filters; ++f) {
        const T bf = bias.empty() ? T{0} : bias[f];
        const T* src = prod.data() + f * cols_n + b * px;
        T* plane = dst + ((b0 + b) * g.filters + f) * px;
        for (std::size_t q = 0; q < px; ++q) plane[q] = src[q] + bf;
      }
    }
  }
  return out;
}

template <typename T>
LinearGrads<T> conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& dout,
                               const Conv2dParams& p, bool need_dx) {
  const ConvGeometry g = conv_geometry(x.shape(), w.shape(), p);
  if (dout.shape() != Shape{g.batch, g.filters, g.out_h, g.out_w}) {
    throw DimensionError("conv2d_backward: bad upstream shape " + to_string(dout.shape()));
  }
  const std::size_t px = g.pixels(), patch = g.patch(), chunk = conv_chunk(g);
  LinearGrads<T> grads{need_dx ? BasicTensor<T>(x.shape()) : BasicTensor<T>(), BasicTensor<T>(w.shape()),
                       BasicTensor<T>({g.filters})};
  const auto wm = as_mat(w, g.filters, patch);
  auto dwm = as_mat(grads.dw, g.filters, patch);
  auto dbm = as_mat(grads.dbias, g.filters, 1);
  std::vector<T> col, dcols;
  RowMat<T> dy;
  const T* src = dout.data().data();
  for (std::size_t b0 = 0; b0 < g.batch; b0 += chunk) {
    const std::size_t nb = std::min(chunk, g.batch - b0), cols_n = nb * px;
    dy.resize(static_cast<Eigen::Index>(g.filters), static_cast<Eigen::Index>(cols_n));
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t f = 0; f < g.filters; ++f) {
        std::copy_n(src + ((b0 + b) * g.filters + f) * px, px, dy.data() + f * cols_n + b * px);
      }
    }
    im2col(x.data().data(), g, p, b0, nb, col);
    dwm.noalias() += dy * CMapMat<T>(col.data(), patch, cols_n).transpose();
    dbm.col(0) += dy.rowwise().sum();
    if (need_dx) {
      dcols.resize(patch * cols_n);
      MapMat<T>(dcols.data(), patch, cols_n).noalias() = wm.transpose() * dy;
      col2im(dcols, g, p, b0, nb, grads.dx.data().data());
    }
  }
  return grads;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  BasicTensor<T> y = x;
  for (auto& v : y.data()) v = v > T{0} ? v : T{0};
  return y;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& dout) {
  x.require_same_shape(dout, "relu_backward");
  BasicTensor<T> dx = dout;
  for (std::size_t i = 0; i < dx.numel(); ++i) {
    if (!(x[i] > T{0})) dx[i] = T{0};
  }
  return dx;
}

template <typename T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& x, std::size_t window, std::size_t stride,
                         std::vector<std::uint32_t>* argmax) {
  require_rank(x.shape(), 4, "maxpool2d input");
  if (window == 0 || stride == 0) throw DimensionError("maxpool2d window and stride must be positive");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Conv2dParams p{stride, 0};
  const std::size_t OH = conv_output_extent(H, window, p), OW = conv_output_extent(W, window, p);
  BasicTensor<T> y({B, C, OH, OW});
  if (argmax) argmax->assign(y.numel(), 0);
  const T* src = x.data().data();
  std::size_t o = 0;
  if (window == 2 && stride == 2) {
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      const std::size_t base = bc * H * W;
      for (std::size_t oh = 0; oh < OH; ++oh) {
        const std::size_t r0 = base + 2 * oh * W, r1 = r0 + W;
        for (std::size_t ow = 0; ow < OW; ++ow, ++o) {
          std::size_t best = r0 + 2 * ow;
          if (src[best + 1] > src[best]) best = best + 1;
          if (src[r1 + 2 * ow] > src[best]) best = r1 + 2 * ow;
          if (src[r1 + 2 * ow + 1] > src[best]) best = r1 + 2 * ow + 1;
          y[o] = src[best];
          if (argmax) (*argmax)[o] = static_cast<std::uint32_t>(best);
        }
      }
    }
    return y;
  }
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const std::size_t base = bc * H * W;
    for (std::size_t oh = 0; oh < OH; ++oh) {
      for (std::size_t ow = 0; ow < OW; ++ow, ++o) {
        std::size_t best = base + oh * stride * W + ow * stride;
        for (std::size_t i = 0; i < window; ++i) {
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = base + (oh * stride + i) * W + ow * stride + j;
            if (src[idx] > src[best]) best = idx;
          }
        }
        y[o] = src[best];
        if (argmax) (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return y;
}

template <typename T>
BasicTensor<T> maxpool2d_backward(const Shape& input_shape, std::span<const std::uint32_t> argmax,
                                  const BasicTensor<T>& dout) {
  if (argmax.size() != dout.numel()) throw DimensionError("maxpool2d_backward: argmax size mismatch");
  BasicTensor<T> dx(input_shape);
  for (std::size_t i = 0; i < dout.numel(); ++i) dx[argmax[i]] += dout[i];
  return dx;
}

template <typename T>
LossAndGrad<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "softmax_cross_entropy logits");
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  if (labels.size() != B) throw DimensionError("softmax_cross_entropy: label count does not match batch");
  LossAndGrad<T> out{0.0, BasicTensor<T>(logits.shape())};
  const double inv_b = 1.0 / static_cast<double>(B);
  std::vector<double> e(K);
  for (std::size_t b = 0; b < B; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= K) {
      throw InputError("label " + std::to_string(label) + " outside [0, " + std::to_string(K) + ")");
    }
    const T* row = logits.data().data() + b * K;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(row[k]));
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      e[k] = std::exp(static_cast<double>(row[k]) - mx);
      sum += e[k];
    }
    const double lse = mx + std::log(sum);
    out.loss += (lse - static_cast<double>(row[label])) * inv_b;
    T* g = out.dlogits.data().data() + b * K;
    for (std::size_t k = 0; k < K; ++k) {
      const double prob = e[k] / sum;
      g[k] = static_cast<T>((prob - (static_cast<std::size_t>(label) == k ? 1.0 : 0.0)) * inv_b);
    }
  }
  return out;
}

template <typename T>
double admm_penalty(const BasicTensor<T>& w, const BasicTensor<T>& z, const BasicTensor<T>& u, double rho) {
  w.require_same_shape(z, "admm_penalty");
  w.require_same_shape(u, "admm_penalty");
  double s = 0.0;
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const double d = static_cast<double>(w[i]) - static_cast<double>(z[i]) + static_cast<double>(u[i]);
    s += d * d;
  }
  return 0.5 * rho * s;
}

template <typename T>
BasicTensor<T> admm_penalty_backward(const BasicTensor<T>& w, const BasicTensor<T>& z, const BasicTensor<T>& u,
                                     double rho) {
  w.require_same_shape(z, "admm_penalty_backward");
  w.require_same_shape(u, "admm_penalty_backward");
  BasicTensor<T> g(w.shape());
  for (std::size_t i = 0; i < w.numel(); ++i) g[i] = static_cast<T>(rho * (w[i] - z[i] + u[i]));
  return g;
}

#define FORGE_INSTANTIATE_OPS(T)                                                                          \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                           \
  template MatmulGrads<T> matmul_backward(const BasicTensor<T>&, const BasicTensor<T>&,                   \
                                          const BasicTensor<T>&);                                         \
  template BasicTensor<T> dense(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);     \
  template LinearGrads<T> dense_backward(const BasicTensor<T>&, const BasicTensor<T>&,                    \
                                         const BasicTensor<T>&);                                          \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,     \
                                 const Conv2dParams&);                                                    \
  template LinearGrads<T> conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&,                   \
                                          const BasicTensor<T>&, const Conv2dParams&,                     \
                                          bool);                                                          \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                    \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template BasicTensor<T> maxpool2d(const BasicTensor<T>&, std::size_t, std::size_t,                      \
                                    std::vector<std::uint32_t>*);                                         \
  template BasicTensor<T> maxpool2d_backward(const Shape&, std::span<const std::uint32_t>,                \
                                             const BasicTensor<T>&);                                      \
  template LossAndGrad<T> softmax_cross_entropy(const BasicTensor<T>&, std::span<const int>);             \
  template double admm_penalty(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,       \
                               double);                                                                   \
  template BasicTensor<T> admm_penalty_backward(const BasicTensor<T>&, const BasicTensor<T>&,             \
                                                const BasicTensor<T>&, double);

FORGE_INSTANTIATE_OPS(float)
FORGE_INSTANTIATE_OPS(double)

#undef FORGE_INSTANTIATE_OPS

}  // namespace forge::ops
