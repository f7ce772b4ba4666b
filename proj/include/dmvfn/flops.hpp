#pragma once

// Static and dynamic FLOPs accounting.
//
// Convention: one multiply-add is 2 FLOPs. Convolutions count
// 2 * k^2 * C_in * C_out * H_out * W_out (transposed convolutions use the input
// grid), linear layers 2 * in * out. Bias adds, activations, resizes, warps,
// residual adds and other elementwise steps count 1 FLOP per output element;
// pooling counts 1 per input element. Concatenation and slicing are free.

#include <cstdint>
#include <string>
#include <vector>

#include "dmvfn/model.hpp"

namespace dmvfn {

inline double conv2d_flops(std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t out_h,
                           std::int64_t out_w) {
  return 2.0 * static_cast<double>(k * k) * static_cast<double>(cin * cout) * static_cast<double>(out_h * out_w);
}

inline double transposed_conv2d_flops(std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t in_h,
                                      std::int64_t in_w) {
  return 2.0 * static_cast<double>(k * k) * static_cast<double>(cin * cout) * static_cast<double>(in_h * in_w);
}

inline double linear_flops(std::int64_t in, std::int64_t out) { return 2.0 * static_cast<double>(in * out); }

struct LayerFlops {
  std::string name;
  double flops = 0.0;
};

struct BlockFlops {
  std::vector<LayerFlops> layers;
  double total() const {
    double t = 0.0;
    for (const auto& l : layers) t += l.flops;
    return t;
  }
};

struct FlopsLedger {
  std::int64_t height = 0, width = 0;
  std::vector<BlockFlops> blocks;
  BlockFlops routing;

  double block_total(std::size_t i) const { return blocks.at(i).total(); }
  double routing_total() const { return routing.total(); }
  /// All blocks, no routing network.
  double super_total() const {
    double t = 0.0;
    for (const auto& b : blocks) t += b.total();
    return t;
  }
  /// Super network plus routing network.
  double static_total() const { return super_total() + routing_total(); }

  /// Routing network plus the selected blocks.
  double dynamic_total(const std::vector<std::uint8_t>& selected) const {
    if (selected.size() != blocks.size())
      throw ShapeError("dynamic_total: " + std::to_string(selected.size()) + " flags for " +
                       std::to_string(blocks.size()) + " blocks");
    double t = routing_total();
    for (std::size_t i = 0; i < blocks.size(); ++i)
      if (selected[i]) t += blocks[i].total();
    return t;
  }

  /// Routing network plus selection-probability-weighted block costs.
  double expected_total(const std::vector<double>& probs) const {
    if (probs.size() != blocks.size())
      throw ShapeError("expected_total: " + std::to_string(probs.size()) + " rates for " +
                       std::to_string(blocks.size()) + " blocks");
    double t = routing_total();
    for (std::size_t i = 0; i < blocks.size(); ++i) t += probs[i] * blocks[i].total();
    return t;
  }
};

namespace detail {

struct FlopsBuilder {
  BlockFlops out;
  void conv(const std::string& name, std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t oh,
            std::int64_t ow, bool act) {
    out.layers.push_back({name, conv2d_flops(cin, cout, k, oh, ow)});
    out.layers.push_back({name + ".bias", static_cast<double>(cout * oh * ow)});
    if (act) out.layers.push_back({name + ".prelu", static_cast<double>(cout * oh * ow)});
  }
  void elementwise(const std::string& name, std::int64_t count) {
    out.layers.push_back({name, static_cast<double>(count)});
  }
};

}  // namespace detail

/// Per-layer FLOPs of one block at frame size H x W, mirroring
/// MvfbBlock::forward.
inline BlockFlops mvfb_flops(int scale, int width, int spatial_width, bool spatial_path, std::int64_t H,
                             std::int64_t W) {
  detail::FlopsBuilder f;
  const std::int64_t half = std::max(1, width / 2), quarter = std::max(1, width / 4);
  const std::int64_t cin = kBlockInputChannels;
  std::int64_t h = H, w = W;
  if (scale != 1) {
    h = std::max<std::int64_t>(1, H / scale);
    w = std::max<std::int64_t>(1, W / scale);
    f.elementwise("motion.resize", cin * h * w);
    f.elementwise("motion.flow_scale", cin * h * w);
  }
  const auto h1 = conv_out_size(h, 3, 2, 1), w1 = conv_out_size(w, 3, 2, 1);
  f.conv("motion.conv0", cin, half, 3, h1, w1, true);
  const auto h2 = conv_out_size(h1, 3, 2, 1), w2 = conv_out_size(w1, 3, 2, 1);
  f.conv("motion.conv1", half, width, 3, h2, w2, true);
  f.conv("motion.conv2", width, width, 3, h2, w2, true);
  f.elementwise("motion.residual", width * h2 * w2);
  f.conv("motion.conv3", width, quarter, 3, h2, w2, true);
  f.elementwise("motion.upsample", quarter * (H / 2) * (W / 2));
  std::int64_t merge_in = quarter;
  if (spatial_path) {
    f.conv("spatial.conv0", cin, spatial_width, 3, H / 2, W / 2, true);
    f.conv("spatial.conv1", spatial_width, spatial_width, 3, H / 2, W / 2, true);
    f.elementwise("spatial.residual", spatial_width * (H / 2) * (W / 2));
    merge_in += spatial_width;
  }
  f.out.layers.push_back({"merge", transposed_conv2d_flops(merge_in, kFlowChannels, 4, H / 2, W / 2)});
  f.elementwise("merge.bias", kFlowChannels * H * W);
  if (scale != 1) f.elementwise("delta_scale", kFlowChannels * H * W);
  f.elementwise("flow_residual", kFlowChannels * H * W);
  f.elementwise("fusion_sigmoid", H * W);
  f.elementwise("warp_prev", 3 * H * W);
  f.elementwise("warp_cur", 3 * H * W);
  f.elementwise("fusion_blend", 4 * 3 * H * W);  // two products, 1 - m, sum
  return f.out;
}

inline BlockFlops routing_flops(int n_blocks, int width, int downsample, std::int64_t H, std::int64_t W) {
  detail::FlopsBuilder f;
  std::int64_t h = H, w = W;
  if (downsample > 1) {
    h = std::max<std::int64_t>(1, H / downsample);
    w = std::max<std::int64_t>(1, W / downsample);
    f.elementwise("routing.resize", 6 * h * w);
  }
  const auto h1 = conv_out_size(h, 3, 2, 1), w1 = conv_out_size(w, 3, 2, 1);
  f.conv("routing.conv0", 6, width, 3, h1, w1, true);
  const auto h2 = conv_out_size(h1, 3, 2, 1), w2 = conv_out_size(w1, 3, 2, 1);
  f.conv("routing.conv1", width, 2 * width, 3, h2, w2, true);
  f.elementwise("routing.pool", 2 * width * h2 * w2);
  f.out.layers.push_back({"routing.head", linear_flops(2 * width, n_blocks)});
  f.elementwise("routing.head.bias", n_blocks);
  return f.out;
}

inline FlopsLedger count_flops(const ModelConfig& cfg, std::int64_t H, std::int64_t W) {
  cfg.validate();
  if (H < 2 || W < 2 || H % 2 || W % 2)
    throw ShapeError("count_flops: frame size must be even and >= 2, got " + std::to_string(H) + "x" +
                     std::to_string(W));
  FlopsLedger led;
  led.height = H;
  led.width = W;
  for (int s : cfg.schedule)
    led.blocks.push_back(mvfb_flops(s, cfg.width_for(s), cfg.spatial_width, cfg.spatial_path, H, W));
  led.routing = routing_flops(static_cast<int>(cfg.schedule.size()), cfg.routing_width, cfg.routing_downsample, H, W);
  return led;
}

}  // namespace dmvfn
