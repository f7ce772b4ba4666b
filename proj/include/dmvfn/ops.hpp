#pragma once

// Differentiable primitives. Images are batch x channel x height x width.

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <map>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <numeric>
#include <vector>

#include "dmvfn/tensor.hpp"

namespace dmvfn {

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  require(a == b, std::string(op) + ": dims " + shape_str(a) + " vs " + shape_str(b));
}

inline void require_rank(const Shape& a, std::size_t r, const char* op, const char* what) {
  require(a.size() == r, std::string(op) + ": " + what + " must have rank " + std::to_string(r) +
                             ", got " + shape_str(a));
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.dims(), b.dims(), "add");
  std::vector<T> out(a.vec());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.vec()[i];
  return detail::record<T>(a.dims(), std::move(out), "add", {a, b}, [a, b](std::span<const T> g) {
    if (T* ga = detail::grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (T* gb = detail::grad_sink(b))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.dims(), b.dims(), "sub");
  std::vector<T> out(a.vec());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.vec()[i];
  return detail::record<T>(a.dims(), std::move(out), "sub", {a, b}, [a, b](std::span<const T> g) {
    if (T* ga = detail::grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (T* gb = detail::grad_sink(b))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.dims(), b.dims(), "mul");
  std::vector<T> out(a.vec());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.vec()[i];
  return detail::record<T>(a.dims(), std::move(out), "mul", {a, b}, [a, b](std::span<const T> g) {
    if (T* ga = detail::grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.vec()[i];
    if (T* gb = detail::grad_sink(b))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.vec()[i];
  });
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.vec());
  for (auto& v : out) v *= s;
  return detail::record<T>(a.dims(), std::move(out), "mul_scalar", {a}, [a, s](std::span<const T> g) {
    if (T* ga = detail::grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.vec());
  for (auto& v : out) v += s;
  return detail::record<T>(a.dims(), std::move(out), "add_scalar", {a}, [a](std::span<const T> g) {
    if (T* ga = detail::grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

// 1 - a
template <class T>
Tensor<T> one_minus(const Tensor<T>& a) {
  std::vector<T> out(a.vec());
  for (auto& v : out) v = T{1} - v;
  return detail::record<T>(a.dims(), std::move(out), "one_minus", {a}, [a](std::span<const T> g) {
    if (T* ga = detail::grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] -= g[i];
  });
}

template <class T>
T sigmoid_value(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.vec().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_value(a.vec()[i]);
  auto y = std::make_shared<std::vector<T>>(out);
  return detail::record<T>(a.dims(), std::move(out), "sigmoid", {a}, [a, y](std::span<const T> g) {
    if (T* ga = detail::grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*y)[i] * (T{1} - (*y)[i]);
  });
}

template <class T>
Tensor<T> abs(const Tensor<T>& a) {
  std::vector<T> out(a.vec());
  for (auto& v : out) v = std::abs(v);
  return detail::record<T>(a.dims(), std::move(out), "abs", {a}, [a](std::span<const T> g) {
    if (T* ga = detail::grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T x = a.vec()[i];
        ga[i] += x > 0 ? g[i] : (x < 0 ? -g[i] : T{0});
      }
  });
}

/// PReLU with one learnable slope per channel (dim 1). slope has dims [C].
template <class T>
Tensor<T> prelu(const Tensor<T>& x, const Tensor<T>& slope) {
  detail::require(x.rank() >= 2, "prelu: input rank must be >= 2, got " + shape_str(x.dims()));
  const auto C = x.dim(1);
  detail::require(slope.numel() == C, "prelu: slope dims " + shape_str(slope.dims()) +
                                          " do not match channels of " + shape_str(x.dims()));
  const auto B = x.dim(0);
  const auto inner = x.numel() / (B * C);
  std::vector<T> out(x.vec());
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c) {
      const T a = slope.vec()[c];
      T* o = out.data() + (b * C + c) * inner;
      for (std::int64_t i = 0; i < inner; ++i)
        if (o[i] < 0) o[i] *= a;
    }
  return detail::record<T>(x.dims(), std::move(out), "prelu", {x, slope},
                           [x, slope, B, C, inner](std::span<const T> g) {
                             T* gx = detail::grad_sink(x);
                             T* gs = detail::grad_sink(slope);
                             for (std::int64_t b = 0; b < B; ++b)
                               for (std::int64_t c = 0; c < C; ++c) {
                                 const T a = slope.vec()[c];
                                 const auto off = (b * C + c) * inner;
                                 for (std::int64_t i = 0; i < inner; ++i) {
                                   const T v = x.vec()[off + i];
                                   if (v < 0) {
                                     if (gx) gx[off + i] += g[off + i] * a;
                                     if (gs) gs[c] += g[off + i] * v;
                                   } else if (gx) {
                                     gx[off + i] += g[off + i];
                                   }
                                 }
                               }
                           });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc{0};
  for (T v : a.vec()) acc += v;
  return detail::record<T>(Shape{1}, {acc}, "sum", {a}, [a](std::span<const T> g) {
    if (T* ga = detail::grad_sink(a))
      for (std::size_t i = 0; i < a.vec().size(); ++i) ga[i] += g[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  const T n = static_cast<T>(a.numel());
  T acc{0};
  for (T v : a.vec()) acc += v;
  return detail::record<T>(Shape{1}, {acc / n}, "mean", {a}, [a, n](std::span<const T> g) {
    if (T* ga = detail::grad_sink(a))
      for (std::size_t i = 0; i < a.vec().size(); ++i) ga[i] += g[0] / n;
  });
}

/// Mean over H x W per channel: [B, C, H, W] -> [B, C].
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank(x.dims(), 4, "global_avg_pool", "input");
  const auto B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  detail::require(HW > 0, "global_avg_pool: empty spatial dims " + shape_str(x.dims()));
  std::vector<T> out(static_cast<std::size_t>(B * C));
  for (std::int64_t i = 0; i < B * C; ++i) {
    T acc{0};
    for (std::int64_t j = 0; j < HW; ++j) acc += x.vec()[i * HW + j];
    out[i] = acc / static_cast<T>(HW);
  }
  return detail::record<T>(Shape{B, C}, std::move(out), "global_avg_pool", {x},
                           [x, B, C, HW](std::span<const T> g) {
                             if (T* gx = detail::grad_sink(x))
                               for (std::int64_t i = 0; i < B * C; ++i)
                                 for (std::int64_t j = 0; j < HW; ++j)
                                   gx[i * HW + j] += g[i] / static_cast<T>(HW);
                           });
}

/// y = x W^T + b with x [B, K], W [N, K], b [N] (b may be undefined).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_rank(x.dims(), 2, "linear", "input");
  detail::require_rank(w.dims(), 2, "linear", "weight");
  const auto B = x.dim(0), K = x.dim(1), N = w.dim(0);
  detail::require(w.dim(1) == K, "linear: input " + shape_str(x.dims()) + " incompatible with weight " +
                                     shape_str(w.dims()));
  if (b.defined())
    detail::require(b.numel() == N, "linear: bias " + shape_str(b.dims()) + " vs weight " + shape_str(w.dims()));
  std::vector<T> out(static_cast<std::size_t>(B * N));
  for (std::int64_t i = 0; i < B; ++i)
    for (std::int64_t n = 0; n < N; ++n) {
      T acc = b.defined() ? b.vec()[n] : T{0};
      for (std::int64_t k = 0; k < K; ++k) acc += x.vec()[i * K + k] * w.vec()[n * K + k];
      out[i * N + n] = acc;
    }
  return detail::record<T>(Shape{B, N}, std::move(out), "linear", {x, w, b},
                           [x, w, b, B, K, N](std::span<const T> g) {
                             T* gx = detail::grad_sink(x);
                             T* gw = detail::grad_sink(w);
                             T* gb = detail::grad_sink(b);
                             for (std::int64_t i = 0; i < B; ++i)
                               for (std::int64_t n = 0; n < N; ++n) {
                                 const T go = g[i * N + n];
                                 if (gb) gb[n] += go;
                                 for (std::int64_t k = 0; k < K; ++k) {
                                   if (gx) gx[i * K + k] += go * w.vec()[n * K + k];
                                   if (gw) gw[n * K + k] += go * x.vec()[i * K + k];
                                 }
                               }
                           });
}

// ---------------------------------------------------------------------------
// Channel / batch plumbing

template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_channels: no inputs");
  const auto& d0 = parts[0].dims();
  detail::require_rank(d0, 4, "concat_channels", "input");
  std::int64_t C = 0;
  for (const auto& p : parts) {
    const auto& d = p.dims();
    detail::require(d.size() == 4 && d[0] == d0[0] && d[2] == d0[2] && d[3] == d0[3],
                    "concat_channels: dims " + shape_str(d) + " vs " + shape_str(d0));
    C += d[1];
  }
  const auto B = d0[0], HW = d0[2] * d0[3];
  std::vector<T> out(static_cast<std::size_t>(B * C * HW));
  std::int64_t c0 = 0;
  for (const auto& p : parts) {
    const auto pc = p.dim(1);
    for (std::int64_t b = 0; b < B; ++b)
      std::copy_n(p.vec().data() + b * pc * HW, pc * HW, out.data() + (b * C + c0) * HW);
    c0 += pc;
  }
  Tensor<T> res(Shape{B, C, d0[2], d0[3]}, std::move(out));
  if (!grad_enabled()) return res;
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (!any) return res;
  auto node = std::make_shared<TapeNode<T>>();
  node->op = "concat_channels";
  for (const auto& p : parts)
    if (p.requires_grad()) node->parents.push_back(p.storage());
  node->backward = [parts, B, C, HW](std::span<const T> g) {
    std::int64_t c0 = 0;
    for (const auto& p : parts) {
      const auto pc = p.dim(1);
      if (T* gp = detail::grad_sink(p))
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t i = 0; i < pc * HW; ++i) gp[b * pc * HW + i] += g[(b * C + c0) * HW + i];
      c0 += pc;
    }
  };
  res.storage()->requires_grad = true;
  res.storage()->node = std::move(node);
  return res;
}

/// Channels [begin, begin + count) of a rank-4 tensor.
template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, std::int64_t begin, std::int64_t count) {
  detail::require_rank(x.dims(), 4, "slice_channels", "input");
  const auto B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  detail::require(begin >= 0 && count >= 1 && begin + count <= C,
                  "slice_channels: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                      ") outside " + shape_str(x.dims()));
  std::vector<T> out(static_cast<std::size_t>(B * count * HW));
  for (std::int64_t b = 0; b < B; ++b)
    std::copy_n(x.vec().data() + (b * C + begin) * HW, count * HW, out.data() + b * count * HW);
  return detail::record<T>(Shape{B, count, x.dim(2), x.dim(3)}, std::move(out), "slice_channels", {x},
                           [x, B, C, HW, begin, count](std::span<const T> g) {
                             if (T* gx = detail::grad_sink(x))
                               for (std::int64_t b = 0; b < B; ++b)
                                 for (std::int64_t i = 0; i < count * HW; ++i)
                                   gx[(b * C + begin) * HW + i] += g[b * count * HW + i];
                           });
}

/// Column `i` of a [B, N] tensor as [B, 1].
template <class T>
Tensor<T> select_column(const Tensor<T>& x, std::int64_t i) {
  detail::require_rank(x.dims(), 2, "select_column", "input");
  const auto B = x.dim(0), N = x.dim(1);
  detail::require(i >= 0 && i < N, "select_column: index " + std::to_string(i) + " outside " + shape_str(x.dims()));
  std::vector<T> out(static_cast<std::size_t>(B));
  for (std::int64_t b = 0; b < B; ++b) out[b] = x.vec()[b * N + i];
  return detail::record<T>(Shape{B, 1}, std::move(out), "select_column", {x}, [x, B, N, i](std::span<const T> g) {
    if (T* gx = detail::grad_sink(x))
      for (std::int64_t b = 0; b < B; ++b) gx[b * N + i] += g[b];
  });
}

/// x[b, ...] * w[b] for w of dims [B, 1] (or [B]).
template <class T>
Tensor<T> mul_per_sample(const Tensor<T>& x, const Tensor<T>& w) {
  const auto B = x.dim(0);
  detail::require(w.numel() == B, "mul_per_sample: weights " + shape_str(w.dims()) + " vs input " + shape_str(x.dims()));
  const auto inner = x.numel() / B;
  std::vector<T> out(x.vec());
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t i = 0; i < inner; ++i) out[b * inner + i] *= w.vec()[b];
  return detail::record<T>(x.dims(), std::move(out), "mul_per_sample", {x, w},
                           [x, w, B, inner](std::span<const T> g) {
                             T* gx = detail::grad_sink(x);
                             T* gw = detail::grad_sink(w);
                             for (std::int64_t b = 0; b < B; ++b)
                               for (std::int64_t i = 0; i < inner; ++i) {
                                 const auto k = b * inner + i;
                                 if (gx) gx[k] += g[k] * w.vec()[b];
                                 if (gw) gw[b] += g[k] * x.vec()[k];
                               }
                           });
}

/// x[b, c, y, x] * m[b, 0, y, x]: broadcasts a one-channel map over channels.
template <class T>
Tensor<T> mul_channel_broadcast(const Tensor<T>& x, const Tensor<T>& m) {
  detail::require_rank(x.dims(), 4, "mul_channel_broadcast", "input");
  const auto B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  detail::require(m.rank() == 4 && m.dim(0) == B && m.dim(1) == 1 && m.dim(2) == x.dim(2) && m.dim(3) == x.dim(3),
                  "mul_channel_broadcast: map " + shape_str(m.dims()) + " vs input " + shape_str(x.dims()));
  std::vector<T> out(x.vec());
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < HW; ++i) out[(b * C + c) * HW + i] *= m.vec()[b * HW + i];
  return detail::record<T>(x.dims(), std::move(out), "mul_channel_broadcast", {x, m},
                           [x, m, B, C, HW](std::span<const T> g) {
                             T* gx = detail::grad_sink(x);
                             T* gm = detail::grad_sink(m);
                             for (std::int64_t b = 0; b < B; ++b)
                               for (std::int64_t c = 0; c < C; ++c)
                                 for (std::int64_t i = 0; i < HW; ++i) {
                                   const auto k = (b * C + c) * HW + i;
                                   if (gx) gx[k] += g[k] * m.vec()[b * HW + i];
                                   if (gm) gm[b * HW + i] += g[k] * x.vec()[k];
                                 }
                           });
}

/// Multiplies each channel by a fixed (non-learned) constant.
template <class T>
Tensor<T> scale_channels(const Tensor<T>& x, std::vector<T> scales) {
  detail::require_rank(x.dims(), 4, "scale_channels", "input");
  const auto B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  detail::require(static_cast<std::int64_t>(scales.size()) == C,
                  "scale_channels: " + std::to_string(scales.size()) + " scales for " + shape_str(x.dims()));
  std::vector<T> out(x.vec());
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < HW; ++i) out[(b * C + c) * HW + i] *= scales[c];
  return detail::record<T>(x.dims(), std::move(out), "scale_channels", {x},
                           [x, s = std::move(scales), B, C, HW](std::span<const T> g) {
                             if (T* gx = detail::grad_sink(x))
                               for (std::int64_t b = 0; b < B; ++b)
                                 for (std::int64_t c = 0; c < C; ++c)
                                   for (std::int64_t i = 0; i < HW; ++i)
                                     gx[(b * C + c) * HW + i] += g[(b * C + c) * HW + i] * s[c];
                           });
}

/// Forward takes `forward_values`, backward passes the output gradient to
/// `source` unchanged (straight-through estimator).
template <class T>
Tensor<T> straight_through(std::vector<T> forward_values, const Tensor<T>& source) {
  detail::require(static_cast<std::int64_t>(forward_values.size()) == source.numel(),
                  "straight_through: value count does not match " + shape_str(source.dims()));
  return detail::record<T>(source.dims(), std::move(forward_values), "straight_through", {source},
                           [source](std::span<const T> g) {
                             if (T* gs = detail::grad_sink(source))
                               for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
                           });
}

// ---------------------------------------------------------------------------
// Convolutions

namespace detail {

struct ConvGeom {
  std::int64_t C, H, W;     // image side
  std::int64_t kh, kw;      // kernel
  std::int64_t stride, pad;
  std::int64_t Ho, Wo;      // column side
};

// col[(c*kh + i)*kw + j][oy*Wo + ox] = img[c][oy*s - p + i][ox*s - p + j]
template <class T>
void im2col(const T* img, const ConvGeom& g, T* col) {
  const auto P = g.Ho * g.Wo;
  for (std::int64_t c = 0; c < g.C; ++c)
    for (std::int64_t i = 0; i < g.kh; ++i)
      for (std::int64_t j = 0; j < g.kw; ++j) {
        T* row = col + ((c * g.kh + i) * g.kw + j) * P;
        for (std::int64_t oy = 0; oy < g.Ho; ++oy) {
          const auto y = oy * g.stride - g.pad + i;
          T* r = row + oy * g.Wo;
          if (y < 0 || y >= g.H) {
            std::fill_n(r, g.Wo, T{0});
            continue;
          }
          const T* src = img + (c * g.H + y) * g.W;
          for (std::int64_t ox = 0; ox < g.Wo; ++ox) {
            const auto x = ox * g.stride - g.pad + j;
            r[ox] = (x >= 0 && x < g.W) ? src[x] : T{0};
          }
        }
      }
}

template <class T>
void col2im(const T* col, const ConvGeom& g, T* img) {
  const auto P = g.Ho * g.Wo;
  for (std::int64_t c = 0; c < g.C; ++c)
    for (std::int64_t i = 0; i < g.kh; ++i)
      for (std::int64_t j = 0; j < g.kw; ++j) {
        const T* row = col + ((c * g.kh + i) * g.kw + j) * P;
        for (std::int64_t oy = 0; oy < g.Ho; ++oy) {
          const auto y = oy * g.stride - g.pad + i;
          if (y < 0 || y >= g.H) continue;
          T* dst = img + (c * g.H + y) * g.W;
          const T* r = row + oy * g.Wo;
          for (std::int64_t ox = 0; ox < g.Wo; ++ox) {
            const auto x = ox * g.stride - g.pad + j;
            if (x >= 0 && x < g.W) dst[x] += r[ox];
          }
        }
      }
}

inline void check_conv_args(const Shape& x, const Shape& w, int stride, int pad, const char* op) {
  require_rank(x, 4, op, "input");
  require_rank(w, 4, op, "weight");
  require(stride >= 1, std::string(op) + ": stride must be >= 1, got " + std::to_string(stride));
  require(pad >= 0, std::string(op) + ": padding must be >= 0, got " + std::to_string(pad));
}

}  // namespace detail

inline std::int64_t conv_out_size(std::int64_t in, std::int64_t k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

inline std::int64_t transposed_conv_out_size(std::int64_t in, std::int64_t k, int stride, int pad) {
  return (in - 1) * stride - 2 * pad + k;
}

/// input [B, Ci, H, W], weight [Co, Ci, kh, kw], bias [Co] or undefined.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad) {
  detail::check_conv_args(x.dims(), w.dims(), stride, pad, "conv2d");
  const auto B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  detail::require(w.dim(1) == Ci, "conv2d: input channels " + std::to_string(Ci) + " (input " + shape_str(x.dims()) +
                                      ") do not match weight " + shape_str(w.dims()));
  if (b.defined())
    detail::require(b.numel() == Co, "conv2d: bias " + shape_str(b.dims()) + " vs weight " + shape_str(w.dims()));
  const auto Ho = conv_out_size(H, kh, stride, pad), Wo = conv_out_size(W, kw, stride, pad);
  detail::require(Ho >= 1 && Wo >= 1, "conv2d: empty output for input " + shape_str(x.dims()) + " and kernel " +
                                          shape_str(w.dims()));
  const detail::ConvGeom geom{Ci, H, W, kh, kw, stride, pad, Ho, Wo};
  const auto K = Ci * kh * kw, P = Ho * Wo;

  std::vector<T> out(static_cast<std::size_t>(B * Co * P));
  std::vector<T> col(static_cast<std::size_t>(K * P));
  detail::CMapMat<T> Wm(w.vec().data(), Co, K);
  for (std::int64_t n = 0; n < B; ++n) {
    detail::im2col(x.vec().data() + n * Ci * H * W, geom, col.data());
    detail::MapMat<T> O(out.data() + n * Co * P, Co, P);
    O.noalias() = Wm * detail::CMapMat<T>(col.data(), K, P);
    if (b.defined())
      for (std::int64_t c = 0; c < Co; ++c) O.row(c).array() += b.vec()[c];
  }
  return detail::record<T>(
      Shape{B, Co, Ho, Wo}, std::move(out), "conv2d", {x, w, b}, [x, w, b, geom, B, Co, K, P](std::span<const T> g) {
        T* gx = detail::grad_sink(x);
        T* gw = detail::grad_sink(w);
        T* gb = detail::grad_sink(b);
        const auto in_sz = geom.C * geom.H * geom.W;
        std::vector<T> col(static_cast<std::size_t>(K * P));
        detail::CMapMat<T> Wm(w.vec().data(), Co, K);
        for (std::int64_t n = 0; n < B; ++n) {
          detail::CMapMat<T> G(g.data() + n * Co * P, Co, P);
          if (gb)
            for (std::int64_t c = 0; c < Co; ++c) {
              // plain loop: Eigen's vectorised sum depends on buffer alignment
              const T* row = g.data() + (n * Co + c) * P;
              gb[c] += std::accumulate(row, row + P, T{0});
            }
          if (gw) {
            detail::im2col(x.vec().data() + n * in_sz, geom, col.data());
            detail::MapMat<T>(gw, Co, K).noalias() += G * detail::CMapMat<T>(col.data(), K, P).transpose();
          }
          if (gx) {
            detail::MapMat<T> Cm(col.data(), K, P);
            Cm.noalias() = Wm.transpose() * G;
            detail::col2im(col.data(), geom, gx + n * in_sz);
          }
        }
      });
}

/// input [B, Ci, H, W], weight [Ci, Co, kh, kw], bias [Co] or undefined.
/// Output size (H - 1) * stride - 2 * pad + k; the adjoint of conv2d with the
/// same weight and geometry.
template <class T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad) {
  detail::check_conv_args(x.dims(), w.dims(), stride, pad, "transposed_conv2d");
  const auto B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  detail::require(w.dim(0) == Ci, "transposed_conv2d: input channels " + std::to_string(Ci) + " (input " +
                                      shape_str(x.dims()) + ") do not match weight " + shape_str(w.dims()));
  if (b.defined())
    detail::require(b.numel() == Co,
                    "transposed_conv2d: bias " + shape_str(b.dims()) + " vs weight " + shape_str(w.dims()));
  const auto Ho = transposed_conv_out_size(H, kh, stride, pad), Wo = transposed_conv_out_size(W, kw, stride, pad);
  detail::require(Ho >= 1 && Wo >= 1, "transposed_conv2d: empty output for input " + shape_str(x.dims()));
  // Geometry of the conv that maps the output image back to the input grid.
  const detail::ConvGeom geom{Co, Ho, Wo, kh, kw, stride, pad, H, W};
  detail::require(conv_out_size(Ho, kh, stride, pad) == H && conv_out_size(Wo, kw, stride, pad) == W,
                  "transposed_conv2d: inconsistent geometry for input " + shape_str(x.dims()));
  const auto K = Co * kh * kw, P = H * W, out_sz = Co * Ho * Wo;

  std::vector<T> out(static_cast<std::size_t>(B * out_sz), T{0});
  std::vector<T> col(static_cast<std::size_t>(K * P));
  detail::CMapMat<T> Wm(w.vec().data(), Ci, K);
  for (std::int64_t n = 0; n < B; ++n) {
    detail::MapMat<T> Cm(col.data(), K, P);
    Cm.noalias() = Wm.transpose() * detail::CMapMat<T>(x.vec().data() + n * Ci * P, Ci, P);
    T* o = out.data() + n * out_sz;
    detail::col2im(col.data(), geom, o);
    if (b.defined())
      for (std::int64_t c = 0; c < Co; ++c)
        for (std::int64_t i = 0; i < Ho * Wo; ++i) o[c * Ho * Wo + i] += b.vec()[c];
  }
  return detail::record<T>(
      Shape{B, Co, Ho, Wo}, std::move(out), "transposed_conv2d", {x, w, b},
      [x, w, b, geom, B, Ci, Co, K, P, out_sz](std::span<const T> g) {
        T* gx = detail::grad_sink(x);
        T* gw = detail::grad_sink(w);
        T* gb = detail::grad_sink(b);
        std::vector<T> col(static_cast<std::size_t>(K * P));
        detail::CMapMat<T> Wm(w.vec().data(), Ci, K);
        const auto plane = geom.H * geom.W;
        for (std::int64_t n = 0; n < B; ++n) {
          const T* gn = g.data() + n * out_sz;
          if (gb)
            for (std::int64_t c = 0; c < Co; ++c)
              for (std::int64_t i = 0; i < plane; ++i) gb[c] += gn[c * plane + i];
          if (!gx && !gw) continue;
          detail::im2col(gn, geom, col.data());
          detail::CMapMat<T> Cm(col.data(), K, P);
          if (gx) detail::MapMat<T>(gx + n * Ci * P, Ci, P).noalias() += Wm * Cm;
          if (gw)
            detail::MapMat<T>(gw, Ci, K).noalias() +=
                detail::CMapMat<T>(x.vec().data() + n * Ci * P, Ci, P) * Cm.transpose();
        }
      });
}

// ---------------------------------------------------------------------------
// Fixed linear resampling of each channel plane (resize, pyramid filters).

/// Sparse linear map from an in_h x in_w plane to an out_h x out_w plane.
/// Output pixel k reads taps [offsets[k], offsets[k+1]).
struct PlaneMap {
  std::int64_t in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  std::vector<std::int64_t> offsets;
  std::vector<std::int64_t> src;
  std::vector<double> weight;
};

namespace detail {

// Half-pixel-centre source coordinate, clamped to the valid range.
inline void bilinear_taps(std::int64_t dst, std::int64_t in, std::int64_t out, std::int64_t& i0, std::int64_t& i1,
                          double& frac) {
  double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
  s = std::clamp(s, 0.0, static_cast<double>(in - 1));
  i0 = static_cast<std::int64_t>(std::floor(s));
  i1 = std::min(i0 + 1, in - 1);
  frac = s - static_cast<double>(i0);
}

}  // namespace detail

inline PlaneMap bilinear_map(std::int64_t in_h, std::int64_t in_w, std::int64_t out_h, std::int64_t out_w) {
  detail::require(in_h >= 1 && in_w >= 1 && out_h >= 1 && out_w >= 1,
                  "bilinear_resize: invalid sizes " + std::to_string(in_h) + "x" + std::to_string(in_w) + " -> " +
                      std::to_string(out_h) + "x" + std::to_string(out_w));
  PlaneMap m{in_h, in_w, out_h, out_w, {}, {}, {}};
  m.offsets.reserve(static_cast<std::size_t>(out_h * out_w + 1));
  m.offsets.push_back(0);
  for (std::int64_t y = 0; y < out_h; ++y) {
    std::int64_t y0, y1;
    double fy;
    detail::bilinear_taps(y, in_h, out_h, y0, y1, fy);
    for (std::int64_t x = 0; x < out_w; ++x) {
      std::int64_t x0, x1;
      double fx;
      detail::bilinear_taps(x, in_w, out_w, x0, x1, fx);
      const std::int64_t ys[2] = {y0, y1}, xs[2] = {x0, x1};
      const double wy[2] = {1 - fy, fy}, wx[2] = {1 - fx, fx};
      for (int a = 0; a < 2; ++a)
        for (int c = 0; c < 2; ++c) {
          const double wgt = wy[a] * wx[c];
          if (wgt == 0.0) continue;
          m.src.push_back(ys[a] * in_w + xs[c]);
          m.weight.push_back(wgt);
        }
      m.offsets.push_back(static_cast<std::int64_t>(m.src.size()));
    }
  }
  return m;
}

namespace detail {

// Maps depend only on their geometry; memoised per thread.
template <class Build>
std::shared_ptr<const PlaneMap> cached_plane_map(int kind, std::int64_t a, std::int64_t b, std::int64_t c,
                                                 std::int64_t d, Build&& build) {
  thread_local std::map<std::array<std::int64_t, 5>, std::shared_ptr<const PlaneMap>> cache;
  const std::array<std::int64_t, 5> key{kind, a, b, c, d};
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto m = std::make_shared<const PlaneMap>(build());
  cache.emplace(key, m);
  return m;
}

}  // namespace detail

template <class T>
Tensor<T> apply_plane_map(const Tensor<T>& x, std::shared_ptr<const PlaneMap> map, const char* op) {
  detail::require_rank(x.dims(), 4, op, "input");
  detail::require(x.dim(2) == map->in_h && x.dim(3) == map->in_w,
                  std::string(op) + ": input " + shape_str(x.dims()) + " does not match map input " +
                      std::to_string(map->in_h) + "x" + std::to_string(map->in_w));
  const auto planes = x.dim(0) * x.dim(1);
  const auto in_sz = map->in_h * map->in_w, out_sz = map->out_h * map->out_w;
  std::vector<T> out(static_cast<std::size_t>(planes * out_sz));
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* src = x.vec().data() + p * in_sz;
    T* dst = out.data() + p * out_sz;
    for (std::int64_t k = 0; k < out_sz; ++k) {
      T acc{0};
      for (auto t = map->offsets[k]; t < map->offsets[k + 1]; ++t)
        acc += static_cast<T>(map->weight[t]) * src[map->src[t]];
      dst[k] = acc;
    }
  }
  return detail::record<T>(Shape{x.dim(0), x.dim(1), map->out_h, map->out_w}, std::move(out), op, {x},
                           [x, map, planes, in_sz, out_sz](std::span<const T> g) {
                             T* gx = detail::grad_sink(x);
                             if (!gx) return;
                             for (std::int64_t p = 0; p < planes; ++p)
                               for (std::int64_t k = 0; k < out_sz; ++k) {
                                 const T gk = g[p * out_sz + k];
                                 for (auto t = map->offsets[k]; t < map->offsets[k + 1]; ++t)
                                   gx[p * in_sz + map->src[t]] += static_cast<T>(map->weight[t]) * gk;
                               }
                           });
}

/// Bilinear resize, half-pixel centres, edge-clamped reads.
template <class T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w) {
  detail::require_rank(x.dims(), 4, "bilinear_resize", "input");
  detail::require(out_h >= 1 && out_w >= 1, "bilinear_resize: output size must be >= 1, got " +
                                                std::to_string(out_h) + "x" + std::to_string(out_w));
  if (out_h == x.dim(2) && out_w == x.dim(3)) return mul_scalar(x, T{1});
  const auto h = x.dim(2), w = x.dim(3);
  return apply_plane_map(
      x, detail::cached_plane_map(0, h, w, out_h, out_w, [&] { return bilinear_map(h, w, out_h, out_w); }),
      "bilinear_resize");
}

}  // namespace dmvfn
