#pragma once

// Independent reference computations shared by the unit and acceptance
// suites: central finite differences, a direct-convolution SSIM and a scalar
// AdamW.

#include <cmath>
#include <functional>
#include <vector>

#include "dmvfn/dmvfn.hpp"

namespace oracle {

using dmvfn::Shape;
using TensorD = dmvfn::Tensor<double>;

inline TensorD random_tensor(const Shape& dims, dmvfn::Rng& rng, double lo = -1.0, double hi = 1.0,
                             bool requires_grad = true) {
  std::vector<double> v(static_cast<std::size_t>(dmvfn::numel_of(dims)));
  for (auto& e : v) e = rng.uniform(lo, hi);
  TensorD t(dims, std::move(v));
  if (requires_grad) t.set_requires_grad(true);
  return t;
}

struct GradCheck {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

/// Compares backward() against central differences for every element of
/// every input (or `max_per_input` evenly spaced elements). Relative error per
/// element is |a - n| / max(|a|, |n|, floor).
inline GradCheck gradcheck(const std::function<TensorD()>& f, const std::vector<TensorD>& inputs,
                           double eps = 1e-6, double floor = 1e-3, std::size_t max_per_input = 0) {
  for (auto t : inputs) t.zero_grad();
  const auto out = f();
  dmvfn::backward(out);
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) analytic.push_back(t.grad_tensor().vec());

  GradCheck res;
  dmvfn::NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto t = inputs[k];
    auto v = t.mutable_values();
    const std::size_t n = v.size();
    const std::size_t stride = max_per_input && n > max_per_input ? n / max_per_input : 1;
    for (std::size_t i = 0; i < n; i += stride) {
      const double x0 = v[i];
      v[i] = x0 + eps;
      const double fp = f().item();
      v[i] = x0 - eps;
      const double fm = f().item();
      v[i] = x0;
      const double num = (fp - fm) / (2 * eps);
      const double a = analytic[k][i];
      const double abs_err = std::abs(a - num);
      const double rel = abs_err / std::max({std::abs(a), std::abs(num), floor});
      res.max_rel_error = std::max(res.max_rel_error, rel);
      res.max_abs_error = std::max(res.max_abs_error, abs_err);
      ++res.checked;
    }
  }
  return res;
}

/// Fixed random projection so vector-valued ops reduce to a scalar whose
/// gradient exercises every output element.
inline TensorD project(const TensorD& y, std::uint64_t seed = 99) {
  dmvfn::Rng rng(seed);
  auto w = random_tensor(y.dims(), rng, -1.0, 1.0, false);
  return dmvfn::sum(dmvfn::mul(y, w));
}

/// Single-scale SSIM by direct 2-D convolution with an explicit 11x11 window.
inline double ssim_direct(const std::vector<double>& a, const std::vector<double>& b, int h, int w) {
  constexpr int K = 11;
  constexpr double sigma = 1.5, C1 = 1e-4, C2 = 9e-4;
  double win[K][K];
  double s = 0;
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < K; ++j) s += (win[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * sigma * sigma)));
  for (auto& row : win)
    for (auto& e : row) e /= s;
  double total = 0;
  int count = 0;
  for (int y = 0; y + K <= h; ++y)
    for (int x = 0; x + K <= w; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int i = 0; i < K; ++i)
        for (int j = 0; j < K; ++j) {
          const double pa = a[(y + i) * w + x + j], pb = b[(y + i) * w + x + j], g = win[i][j];
          ma += g * pa;
          mb += g * pb;
          saa += g * pa * pa;
          sbb += g * pb * pb;
          sab += g * pa * pb;
        }
      const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
      total += ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
      ++count;
    }
  return total / count;
}

/// Textbook scalar AdamW with decoupled decay.
struct ScalarAdamW {
  double w, m = 0, v = 0;
  int t = 0;
  double b1 = 0.9, b2 = 0.999, eps = 1e-8, lambda;

  ScalarAdamW(double w0, double weight_decay) : w(w0), lambda(weight_decay) {}

  void step(double g, double lr) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    w = w - lr * lambda * w - lr * mh / (std::sqrt(vh) + eps);
  }
};

/// Frame `src` moved by (dx, dy) whole pixels, for interior comparisons.
inline bool shifted_equal(const dmvfn::Frame& src, const dmvfn::Frame& dst, int dx, int dy, int margin, double tol) {
  const auto C = src.dim(1), H = src.dim(2), W = src.dim(3);
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t y = margin; y < H - margin; ++y)
      for (std::int64_t x = margin; x < W - margin; ++x) {
        const auto sy = y - dy, sx = x - dx;
        if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
        if (std::abs(dst.at(0, c, y, x) - src.at(0, c, sy, sx)) > tol) return false;
      }
  return true;
}

}  // namespace oracle
