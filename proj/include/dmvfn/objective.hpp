#pragma once

// Laplacian-pyramid L1 reconstruction loss with geometric deep supervision.

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "dmvfn/ops.hpp"

namespace dmvfn {

namespace detail {

inline constexpr double kBinomial5[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};

}  // namespace detail

/// 5-tap binomial blur followed by 2x decimation; edge-clamped reads.
/// Output is ceil(h/2) x ceil(w/2).
inline PlaneMap pyr_down_map(std::int64_t h, std::int64_t w) {
  PlaneMap m{h, w, (h + 1) / 2, (w + 1) / 2, {}, {}, {}};
  m.offsets.push_back(0);
  for (std::int64_t y = 0; y < m.out_h; ++y)
    for (std::int64_t x = 0; x < m.out_w; ++x) {
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
          const auto sy = std::clamp<std::int64_t>(2 * y + i - 2, 0, h - 1);
          const auto sx = std::clamp<std::int64_t>(2 * x + j - 2, 0, w - 1);
          m.src.push_back(sy * w + sx);
          m.weight.push_back(detail::kBinomial5[i] * detail::kBinomial5[j]);
        }
      m.offsets.push_back(static_cast<std::int64_t>(m.src.size()));
    }
  return m;
}

/// Zero-insertion upsample to out_h x out_w followed by the binomial blur,
/// renormalised per output pixel so constant planes stay constant.
inline PlaneMap pyr_up_map(std::int64_t h, std::int64_t w, std::int64_t out_h, std::int64_t out_w) {
  PlaneMap m{h, w, out_h, out_w, {}, {}, {}};
  m.offsets.push_back(0);
  for (std::int64_t y = 0; y < out_h; ++y)
    for (std::int64_t x = 0; x < out_w; ++x) {
      const auto first = m.src.size();
      double total = 0.0;
      for (int i = 0; i < 5; ++i) {
        const auto uy = y + i - 2;
        if (uy < 0 || uy % 2 != 0 || uy / 2 >= h) continue;
        for (int j = 0; j < 5; ++j) {
          const auto ux = x + j - 2;
          if (ux < 0 || ux % 2 != 0 || ux / 2 >= w) continue;
          const double wgt = detail::kBinomial5[i] * detail::kBinomial5[j];
          m.src.push_back((uy / 2) * w + ux / 2);
          m.weight.push_back(wgt);
          total += wgt;
        }
      }
      for (auto k = first; k < m.src.size(); ++k) m.weight[k] /= total;
      m.offsets.push_back(static_cast<std::int64_t>(m.src.size()));
    }
  return m;
}

template <class T>
Tensor<T> pyr_down(const Tensor<T>& x) {
  detail::require_rank(x.dims(), 4, "pyr_down", "input");
  const auto h = x.dim(2), w = x.dim(3);
  return apply_plane_map(x, detail::cached_plane_map(1, h, w, 0, 0, [&] { return pyr_down_map(h, w); }),
                         "pyr_down");
}

template <class T>
Tensor<T> pyr_up(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w) {
  detail::require_rank(x.dims(), 4, "pyr_up", "input");
  const auto h = x.dim(2), w = x.dim(3);
  return apply_plane_map(
      x, detail::cached_plane_map(2, h, w, out_h, out_w, [&] { return pyr_up_map(h, w, out_h, out_w); }), "pyr_up");
}

/// Band-pass levels (finest first) followed by the coarsest low-pass level.
template <class T>
struct LapPyramid {
  std::vector<Tensor<T>> levels;
  std::size_t size() const { return levels.size(); }
};

template <class T>
LapPyramid<T> laplacian_pyramid(const Tensor<T>& img, int L) {
  detail::require_rank(img.dims(), 4, "laplacian_pyramid", "image");
  if (L < 1) throw ConfigError("laplacian_pyramid: level count must be >= 1, got " + std::to_string(L));
  const std::int64_t need = std::int64_t{1} << (L - 1);
  if (img.dim(2) < need || img.dim(3) < need)
    throw ShapeError("laplacian_pyramid: image " + shape_str(img.dims()) + " too small for " + std::to_string(L) +
                     " levels (needs >= " + std::to_string(need) + ")");
  LapPyramid<T> pyr;
  Tensor<T> cur = img;
  for (int j = 0; j + 1 < L; ++j) {
    auto low = pyr_down(cur);
    pyr.levels.push_back(sub(cur, pyr_up(low, cur.dim(2), cur.dim(3))));
    cur = low;
  }
  pyr.levels.push_back(cur);
  return pyr;
}

template <class T>
Tensor<T> reconstruct(const LapPyramid<T>& pyr) {
  Tensor<T> cur = pyr.levels.back();
  for (auto j = static_cast<std::ptrdiff_t>(pyr.size()) - 2; j >= 0; --j) {
    const auto& band = pyr.levels[static_cast<std::size_t>(j)];
    cur = add(band, pyr_up(cur, band.dim(2), band.dim(3)));
  }
  return cur;
}

/// Sum over pyramid levels of the mean absolute difference. The pyramid is
/// linear, so it is built once on a - b.
template <class T>
Tensor<T> lap_l1(const Tensor<T>& a, const Tensor<T>& b, int L) {
  detail::require_same(a.dims(), b.dims(), "lap_l1");
  const auto pyr = laplacian_pyramid(sub(a, b), L);
  Tensor<T> total = mean(abs(pyr.levels[0]));
  for (std::size_t j = 1; j < pyr.size(); ++j) total = add(total, mean(abs(pyr.levels[j])));
  return total;
}

enum class Supervision { full, single };

struct LossConfig {
  double gamma = 0.8;
  int levels = 5;
  Supervision supervision = Supervision::full;
  double gumbel_reg_weight = 0.0;

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must be in (0, 1]");
    if (levels < 1) throw ConfigError("pyramid levels must be >= 1");
    if (gumbel_reg_weight < 0.0) throw ConfigError("gumbel regularizer weight must be >= 0");
  }
};

/// gamma^(n - i) for i = 1..n.
inline std::vector<double> supervision_weights(std::size_t n, double gamma) {
  std::vector<double> w(n);
  for (std::size_t i = 1; i <= n; ++i) w[i - 1] = std::pow(gamma, static_cast<double>(n - i));
  return w;
}

/// Deep-supervision loss over the block outputs (block 1 first). When
/// `soft_routing` is given and the regularizer weight is positive, adds
/// weight * mean(v).
template <class T>
Tensor<T> total_loss(const std::vector<Tensor<T>>& intermediates, const Tensor<T>& target, const LossConfig& cfg,
                     const Tensor<T>* soft_routing = nullptr) {
  cfg.validate();
  if (intermediates.empty()) throw ShapeError("total_loss: no intermediate outputs");
  Tensor<T> loss;
  if (cfg.supervision == Supervision::single) {
    loss = lap_l1(intermediates.back(), target, cfg.levels);
  } else {
    const auto w = supervision_weights(intermediates.size(), cfg.gamma);
    for (std::size_t i = 0; i < intermediates.size(); ++i) {
      auto term = mul_scalar(lap_l1(intermediates[i], target, cfg.levels), static_cast<T>(w[i]));
      loss = loss.defined() ? add(loss, term) : term;
    }
  }
  if (soft_routing && cfg.gumbel_reg_weight > 0.0)
    loss = add(loss, mul_scalar(mean(*soft_routing), static_cast<T>(cfg.gumbel_reg_weight)));
  return loss;
}

}  // namespace dmvfn
