#pragma once

// Backward warping and voxel-flow fusion.
//
// Flow is stored in pixels; channel 0 is horizontal, channel 1 vertical. The
// value at target pixel p is sampled from the source image at p + flow(p),
// with the sample point clamped to the image rectangle.

#include <cmath>
#include <cstdint>
#include <vector>

#include "dmvfn/ops.hpp"

namespace dmvfn {

/// Bilinear backward warp of `image` [B, C, H, W] by `flow` [B, 2, H, W].
/// Differentiable w.r.t. both; the flow gradient is zero where the sample
/// point was clamped.
template <class T>
Tensor<T> backward_warp(const Tensor<T>& image, const Tensor<T>& flow) {
  detail::require_rank(image.dims(), 4, "backward_warp", "image");
  detail::require_rank(flow.dims(), 4, "backward_warp", "flow");
  const auto B = image.dim(0), C = image.dim(1), H = image.dim(2), W = image.dim(3);
  detail::require(flow.dim(0) == B && flow.dim(1) == 2 && flow.dim(2) == H && flow.dim(3) == W,
                  "backward_warp: flow " + shape_str(flow.dims()) + " does not match image " +
                      shape_str(image.dims()));
  const auto HW = H * W;

  struct Tap {
    std::int64_t x0, x1, y0, y1;
    T ax, ay;
    bool in_x, in_y;  // sample not clamped on that axis
  };
  auto taps = std::make_shared<std::vector<Tap>>(static_cast<std::size_t>(B * HW));
  std::vector<T> out(static_cast<std::size_t>(B * C * HW));
  const T maxx = static_cast<T>(W - 1), maxy = static_cast<T>(H - 1);
  for (std::int64_t b = 0; b < B; ++b) {
    const T* fx = flow.vec().data() + b * 2 * HW;
    const T* fy = fx + HW;
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        const auto p = y * W + x;
        T sx = static_cast<T>(x) + fx[p];
        T sy = static_cast<T>(y) + fy[p];
        Tap t{};
        t.in_x = sx >= T{0} && sx <= maxx;
        t.in_y = sy >= T{0} && sy <= maxy;
        sx = std::clamp(sx, T{0}, maxx);
        sy = std::clamp(sy, T{0}, maxy);
        t.x0 = static_cast<std::int64_t>(std::floor(sx));
        t.y0 = static_cast<std::int64_t>(std::floor(sy));
        t.x1 = std::min<std::int64_t>(t.x0 + 1, W - 1);
        t.y1 = std::min<std::int64_t>(t.y0 + 1, H - 1);
        t.ax = sx - static_cast<T>(t.x0);
        t.ay = sy - static_cast<T>(t.y0);
        (*taps)[b * HW + p] = t;
        for (std::int64_t c = 0; c < C; ++c) {
          const T* img = image.vec().data() + (b * C + c) * HW;
          const T top = img[t.y0 * W + t.x0] * (T{1} - t.ax) + img[t.y0 * W + t.x1] * t.ax;
          const T bot = img[t.y1 * W + t.x0] * (T{1} - t.ax) + img[t.y1 * W + t.x1] * t.ax;
          out[(b * C + c) * HW + p] = top * (T{1} - t.ay) + bot * t.ay;
        }
      }
  }
  return detail::record<T>(image.dims(), std::move(out), "backward_warp", {image, flow},
                           [image, flow, taps, B, C, W, HW](std::span<const T> g) {
                             T* gi = detail::grad_sink(image);
                             T* gf = detail::grad_sink(flow);
                             for (std::int64_t b = 0; b < B; ++b)
                               for (std::int64_t p = 0; p < HW; ++p) {
                                 const Tap& t = (*taps)[b * HW + p];
                                 T dsx{0}, dsy{0};
                                 for (std::int64_t c = 0; c < C; ++c) {
                                   const auto base = (b * C + c) * HW;
                                   const T go = g[base + p];
                                   if (go == T{0}) continue;
                                   if (gi) {
                                     gi[base + t.y0 * W + t.x0] += go * (T{1} - t.ax) * (T{1} - t.ay);
                                     gi[base + t.y0 * W + t.x1] += go * t.ax * (T{1} - t.ay);
                                     gi[base + t.y1 * W + t.x0] += go * (T{1} - t.ax) * t.ay;
                                     gi[base + t.y1 * W + t.x1] += go * t.ax * t.ay;
                                   }
                                   if (gf) {
                                     const T* img = image.vec().data() + base;
                                     const T i00 = img[t.y0 * W + t.x0], i01 = img[t.y0 * W + t.x1];
                                     const T i10 = img[t.y1 * W + t.x0], i11 = img[t.y1 * W + t.x1];
                                     dsx += go * ((T{1} - t.ay) * (i01 - i00) + t.ay * (i11 - i10));
                                     dsy += go * ((T{1} - t.ax) * (i10 - i00) + t.ax * (i11 - i01));
                                   }
                                 }
                                 if (gf) {
                                   // x1 == x0 at the right edge: the sample sits on the border.
                                   if (t.in_x && t.x1 != t.x0) gf[b * 2 * HW + p] += dsx;
                                   if (t.in_y && t.y1 != t.y0) gf[b * 2 * HW + HW + p] += dsy;
                                 }
                               }
                           });
}

/// The voxel flow: two backward flows plus a fusion map m in [0, 1].
template <class T>
struct VoxelFlow {
  Tensor<T> f_prev;  // target -> frame t-1, [B, 2, H, W]
  Tensor<T> f_cur;   // target -> frame t,   [B, 2, H, W]
  Tensor<T> m;       // weight of the warped t-1 frame, [B, 1, H, W]
};

/// Splits a 5-channel flow state (f_prev, f_cur, fusion logit) into a voxel
/// flow; the fusion map is sigmoid(logit).
template <class T>
VoxelFlow<T> voxel_flow_from_state(const Tensor<T>& state) {
  detail::require(state.rank() == 4 && state.dim(1) == 5,
                  "voxel_flow_from_state: expected 5 channels, got " + shape_str(state.dims()));
  return {slice_channels(state, 0, 2), slice_channels(state, 2, 2), sigmoid(slice_channels(state, 4, 1))};
}

template <class T>
Tensor<T> clamp01(const Tensor<T>& x) {
  std::vector<T> v(x.vec());
  for (auto& e : v) e = std::clamp(e, T{0}, T{1});
  return Tensor<T>(x.dims(), std::move(v));
}

/// warp(prev, f_prev) * m + warp(cur, f_cur) * (1 - m), optionally clamped to
/// [0, 1]. The clamp is value-only and cuts the tape, so the training loss
/// uses clamp_output = false.
template <class T>
Tensor<T> apply_voxel_flow(const Tensor<T>& prev, const Tensor<T>& cur, const VoxelFlow<T>& F,
                           bool clamp_output = true) {
  detail::require_same(prev.dims(), cur.dims(), "apply_voxel_flow");
  for (T v : F.m.vec())
    if (!(v >= T{0} && v <= T{1}))
      throw std::domain_error("apply_voxel_flow: fusion map value " + std::to_string(static_cast<double>(v)) +
                              " outside [0, 1]");
  const auto warped_prev = backward_warp(prev, F.f_prev);
  const auto warped_cur = backward_warp(cur, F.f_cur);
  auto out = add(mul_channel_broadcast(warped_prev, F.m), mul_channel_broadcast(warped_cur, one_minus(F.m)));
  return clamp_output ? clamp01(out) : out;
}

}  // namespace dmvfn
