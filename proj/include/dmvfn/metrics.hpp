#pragma once

// Image quality metrics on [0, 1] frames, computed in double.
//
// MS-SSIM: 11x11 Gaussian window (sigma 1.5) over the valid region, K1 = 0.01,
// K2 = 0.03, dynamic range 1, 2x2 average pooling between scales and the
// standard five-scale weights. The number of scales drops while the smaller
// side at the coarsest scale would be below the window size; the remaining
// weights are renormalised. Contrast-structure terms are clamped at zero
// before the fractional powers. Multi-channel frames are scored per channel
// and averaged.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dmvfn/tensor.hpp"

namespace dmvfn {

inline constexpr std::array<double, 5> kMsSsimWeights = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kPsnrCap = 99.0;

namespace detail {

struct Plane {
  std::int64_t h = 0, w = 0;
  std::vector<double> v;
  double at(std::int64_t y, std::int64_t x) const { return v[static_cast<std::size_t>(y * w + x)]; }
};

inline std::array<double, kSsimWindow> gaussian_window() {
  std::array<double, kSsimWindow> g{};
  double s = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - (kSsimWindow - 1) / 2.0;
    s += (g[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma)));
  }
  for (auto& e : g) e /= s;
  return g;
}

// Separable valid-mode Gaussian filtering.
inline Plane gauss_filter(const Plane& p) {
  static const auto g = gaussian_window();
  const auto oh = p.h - kSsimWindow + 1, ow = p.w - kSsimWindow + 1;
  Plane tmp{p.h, ow, std::vector<double>(static_cast<std::size_t>(p.h * ow))};
  for (std::int64_t y = 0; y < p.h; ++y)
    for (std::int64_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int k = 0; k < kSsimWindow; ++k) acc += g[k] * p.at(y, x + k);
      tmp.v[y * ow + x] = acc;
    }
  Plane out{oh, ow, std::vector<double>(static_cast<std::size_t>(oh * ow))};
  for (std::int64_t y = 0; y < oh; ++y)
    for (std::int64_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int k = 0; k < kSsimWindow; ++k) acc += g[k] * tmp.at(y + k, x);
      out.v[y * ow + x] = acc;
    }
  return out;
}

inline Plane avg_pool2(const Plane& p) {
  Plane out{p.h / 2, p.w / 2, {}};
  out.v.resize(static_cast<std::size_t>(out.h * out.w));
  for (std::int64_t y = 0; y < out.h; ++y)
    for (std::int64_t x = 0; x < out.w; ++x)
      out.v[y * out.w + x] =
          0.25 * (p.at(2 * y, 2 * x) + p.at(2 * y, 2 * x + 1) + p.at(2 * y + 1, 2 * x) + p.at(2 * y + 1, 2 * x + 1));
  return out;
}

struct SsimTerms {
  double ssim;  // mean of luminance * contrast-structure
  double cs;    // mean of contrast-structure
};

inline SsimTerms ssim_terms(const Plane& a, const Plane& b) {
  constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  Plane aa = a, bb = b, ab = a;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    aa.v[i] = a.v[i] * a.v[i];
    bb.v[i] = b.v[i] * b.v[i];
    ab.v[i] = a.v[i] * b.v[i];
  }
  const auto mu_a = gauss_filter(a), mu_b = gauss_filter(b);
  const auto e_aa = gauss_filter(aa), e_bb = gauss_filter(bb), e_ab = gauss_filter(ab);
  double s_sum = 0.0, cs_sum = 0.0;
  for (std::size_t i = 0; i < mu_a.v.size(); ++i) {
    const double ma = mu_a.v[i], mb = mu_b.v[i];
    const double va = e_aa.v[i] - ma * ma, vb = e_bb.v[i] - mb * mb, cov = e_ab.v[i] - ma * mb;
    const double cs = (2.0 * cov + C2) / (va + vb + C2);
    const double l = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
    cs_sum += cs;
    s_sum += l * cs;
  }
  const auto n = static_cast<double>(mu_a.v.size());
  return {s_sum / n, cs_sum / n};
}

inline void check_pair(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": dims " + shape_str(a) + " vs " + shape_str(b));
  if (a.size() < 2) throw ShapeError(std::string(what) + ": need at least 2 dims, got " + shape_str(a));
}

template <class T>
std::vector<Plane> planes_of(const Tensor<T>& t) {
  const auto h = t.dim(t.rank() - 2), w = t.dim(t.rank() - 1);
  const auto n = t.numel() / (h * w);
  std::vector<Plane> out;
  for (std::int64_t p = 0; p < n; ++p) {
    Plane pl{h, w, std::vector<double>(t.vec().begin() + p * h * w, t.vec().begin() + (p + 1) * h * w)};
    out.push_back(std::move(pl));
  }
  return out;
}

}  // namespace detail

/// Number of MS-SSIM scales usable for an h x w image (0 if none).
inline int ms_ssim_scales(std::int64_t h, std::int64_t w) {
  int s = static_cast<int>(kMsSsimWeights.size());
  while (s > 0 && std::min(h, w) / (std::int64_t{1} << (s - 1)) < kSsimWindow) --s;
  return s;
}

/// Single-scale SSIM, mean over channel planes.
template <class T>
double ssim(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_pair(a.dims(), b.dims(), "ssim");
  const auto pa = detail::planes_of(a), pb = detail::planes_of(b);
  if (pa[0].h < kSsimWindow || pa[0].w < kSsimWindow)
    throw ShapeError("ssim: image " + shape_str(a.dims()) + " smaller than the 11x11 window");
  double acc = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i) acc += detail::ssim_terms(pa[i], pb[i]).ssim;
  return acc / static_cast<double>(pa.size());
}

template <class T>
double ms_ssim(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_pair(a.dims(), b.dims(), "ms_ssim");
  const auto h = a.dim(a.rank() - 2), w = a.dim(a.rank() - 1);
  const int scales = ms_ssim_scales(h, w);
  if (scales == 0) throw ShapeError("ms_ssim: image " + shape_str(a.dims()) + " smaller than the 11x11 window");
  double wsum = 0.0;
  for (int s = 0; s < scales; ++s) wsum += kMsSsimWeights[s];

  auto pa = detail::planes_of(a), pb = detail::planes_of(b);
  double total = 0.0;
  for (std::size_t c = 0; c < pa.size(); ++c) {
    detail::Plane x = pa[c], y = pb[c];
    double value = 1.0;
    for (int s = 0; s < scales; ++s) {
      const auto terms = detail::ssim_terms(x, y);
      const double wt = kMsSsimWeights[s] / wsum;
      if (scales == 1) {
        value = terms.ssim;
      } else if (s + 1 < scales) {
        value *= std::pow(std::max(terms.cs, 0.0), wt);
        x = detail::avg_pool2(x);
        y = detail::avg_pool2(y);
      } else {
        value *= std::pow(std::max(terms.ssim, 0.0), wt);
      }
    }
    total += value;
  }
  return total / static_cast<double>(pa.size());
}

/// 10 log10(1 / MSE) on the [0, 1] range; exactly equal inputs give 99 dB.
template <class T>
double psnr(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_pair(a.dims(), b.dims(), "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < a.vec().size(); ++i) {
    const double d = static_cast<double>(a.vec()[i]) - static_cast<double>(b.vec()[i]);
    se += d * d;
  }
  if (se == 0.0) return kPsnrCap;
  return 10.0 * std::log10(1.0 / (se / static_cast<double>(a.numel())));
}

}  // namespace dmvfn
