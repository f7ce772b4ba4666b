#pragma once

// Multi-scale voxel flow blocks and the routed chain built from them.

#include <cstdint>
#include <string>
#include <vector>

#include "dmvfn/nn.hpp"
#include "dmvfn/routing.hpp"
#include "dmvfn/warp.hpp"

namespace dmvfn {

/// Scale schedules by their short names, e.g. "[4,2,1]" -> 4,4,4,2,2,2,1,1,1.
inline std::vector<int> schedule_from_name(const std::string& name) {
  static const std::map<std::string, std::vector<int>> table = {
      {"[1]", {1, 1, 1, 1, 1, 1, 1, 1, 1}},       {"[2]", {2, 2, 2, 2, 2, 2, 2, 2, 2}},
      {"[4]", {4, 4, 4, 4, 4, 4, 4, 4, 4}},       {"[1,2]", {1, 1, 1, 1, 2, 2, 2, 2, 2}},
      {"[1,4]", {1, 1, 1, 1, 4, 4, 4, 4, 4}},     {"[2,1]", {2, 2, 2, 2, 1, 1, 1, 1, 1}},
      {"[4,1]", {4, 4, 4, 4, 1, 1, 1, 1, 1}},     {"[1,2,4]", {1, 1, 1, 2, 2, 2, 4, 4, 4}},
      {"[4,2,1]", {4, 4, 4, 2, 2, 2, 1, 1, 1}},
  };
  std::string key;
  for (char c : name)
    if (c != ' ') key += c;
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown scale schedule '" + name + "'");
  return it->second;
}

struct ModelConfig {
  std::vector<int> schedule{4, 4, 4, 2, 2, 2, 1, 1, 1};
  // Motion-path feature widths per scale factor.
  int width_s4 = 64;
  int width_s2 = 48;
  int width_s1 = 32;
  int spatial_width = 8;
  bool spatial_path = true;
  int routing_width = 16;
  int routing_downsample = 4;
  std::uint64_t init_seed = 0;

  int width_for(int scale) const {
    switch (scale) {
      case 4: return width_s4;
      case 2: return width_s2;
      case 1: return width_s1;
    }
    throw ConfigError("scale factor must be 1, 2 or 4, got " + std::to_string(scale));
  }

  void validate() const {
    if (schedule.empty()) throw ConfigError("scale schedule is empty");
    for (int s : schedule) (void)width_for(s);
    if (width_s4 < 4 || width_s2 < 4 || width_s1 < 4) throw ConfigError("motion widths must be >= 4");
    if (spatial_width < 1 || routing_width < 1) throw ConfigError("widths must be >= 1");
    if (routing_downsample < 1) throw ConfigError("routing downsample must be >= 1");
  }
};

/// Input channels of a block: prev (3), cur (3), current estimate (3),
/// flow state (5).
inline constexpr std::int64_t kBlockInputChannels = 14;
/// Flow state channels: f_prev (2), f_cur (2), fusion logit (1).
inline constexpr std::int64_t kFlowChannels = 5;

/// Image estimate and flow state passed between blocks. The fifth flow
/// channel is the fusion logit; the fusion map is its sigmoid.
template <class T>
struct BlockState {
  Tensor<T> image;  // [B, 3, H, W]
  Tensor<T> flow;   // [B, 5, H, W]

  static BlockState zeros(std::int64_t B, std::int64_t H, std::int64_t W) {
    return {Tensor<T>(Shape{B, 3, H, W}), Tensor<T>(Shape{B, kFlowChannels, H, W})};
  }
};

template <class T>
struct MvfbOutput {
  BlockState<T> state;
  Tensor<T> delta;  // residual added to the incoming flow state
};

/// One refinement block. The motion path runs on a 1/scale resize of the
/// inputs and downsamples 4x more; the spatial path works at half
/// resolution. Both are merged at half resolution and a stride-2 transposed
/// conv (zero-initialised) emits the 5-channel flow residual at full size.
template <class T>
class MvfbBlock {
 public:
  MvfbBlock() = default;

  static MvfbBlock make(ParamSet<T>& ps, const std::string& name, int scale, int width, int spatial_width,
                        bool spatial_path, Rng& rng) {
    MvfbBlock b;
    b.scale_ = scale;
    b.spatial_path_ = spatial_path;
    const int half = std::max(1, width / 2), quarter = std::max(1, width / 4);
    b.m0_ = ConvAct<T>::make(ps, name + ".motion.conv0", kBlockInputChannels, half, 3, 2, 1, rng);
    b.m1_ = ConvAct<T>::make(ps, name + ".motion.conv1", half, width, 3, 2, 1, rng);
    b.m2_ = ConvAct<T>::make(ps, name + ".motion.conv2", width, width, 3, 1, 1, rng);
    b.m3_ = ConvAct<T>::make(ps, name + ".motion.conv3", width, quarter, 3, 1, 1, rng);
    std::int64_t merge_in = quarter;
    if (spatial_path) {
      b.s0_ = ConvAct<T>::make(ps, name + ".spatial.conv0", kBlockInputChannels, spatial_width, 3, 2, 1, rng);
      b.s1_ = ConvAct<T>::make(ps, name + ".spatial.conv1", spatial_width, spatial_width, 3, 1, 1, rng);
      merge_in += spatial_width;
    }
    b.merge_ = Conv<T>::make(ps, name + ".merge", merge_in, kFlowChannels, 4, 2, 1, rng, /*transposed=*/true,
                             /*zero_init=*/true);
    return b;
  }

  int scale() const { return scale_; }
  bool spatial_path() const { return spatial_path_; }
  const ConvAct<T>& motion(int i) const { return *std::array{&m0_, &m1_, &m2_, &m3_}[i]; }
  const ConvAct<T>& spatial(int i) const { return i == 0 ? s0_ : s1_; }
  const Conv<T>& merge() const { return merge_; }

  MvfbOutput<T> forward(const Tensor<T>& prev, const Tensor<T>& cur, const BlockState<T>& in) const {
    detail::require_same(prev.dims(), cur.dims(), "mvfb_forward");
    detail::require_rank(prev.dims(), 4, "mvfb_forward", "frame");
    const auto B = prev.dim(0), H = prev.dim(2), W = prev.dim(3);
    detail::require(prev.dim(1) == 3, "mvfb_forward: frames must have 3 channels, got " + shape_str(prev.dims()));
    detail::require(in.image.dims() == Shape{B, 3, H, W} && in.flow.dims() == Shape{B, kFlowChannels, H, W},
                    "mvfb_forward: state " + shape_str(in.image.dims()) + "/" + shape_str(in.flow.dims()) +
                        " does not match frames " + shape_str(prev.dims()));
    detail::require(H % 2 == 0 && W % 2 == 0, "mvfb_forward: frame size must be even, got " + shape_str(prev.dims()));

    const auto x = concat_channels<T>({prev, cur, in.image, in.flow});

    // motion path; flow inputs are expressed in pixels of the resized grid
    Tensor<T> xm = x;
    if (scale_ != 1) {
      xm = bilinear_resize(x, std::max<std::int64_t>(1, H / scale_), std::max<std::int64_t>(1, W / scale_));
      std::vector<T> s(kBlockInputChannels, T{1});
      for (int c = 9; c < 13; ++c) s[c] = T{1} / static_cast<T>(scale_);
      xm = scale_channels(xm, std::move(s));
    }
    auto m = m1_(m0_(xm));
    m = add(m2_(m), m);
    m = bilinear_resize(m3_(m), H / 2, W / 2);

    Tensor<T> feat = m;
    if (spatial_path_) {
      auto s = s0_(x);
      s = add(s1_(s), s);
      feat = concat_channels<T>({m, s});
    }
    auto delta = merge_(feat);
    if (scale_ != 1) {
      const auto g = static_cast<T>(scale_);
      delta = scale_channels(delta, {g, g, g, g, T{1}});
    }
    auto flow = add(in.flow, delta);
    auto image = apply_voxel_flow(prev, cur, voxel_flow_from_state(flow), /*clamp_output=*/false);
    return {{image, flow}, delta};
  }

 private:
  int scale_ = 1;
  bool spatial_path_ = true;
  ConvAct<T> m0_, m1_, m2_, m3_, s0_, s1_;
  Conv<T> merge_;
};

template <class T>
MvfbOutput<T> mvfb_forward(const MvfbBlock<T>& block, const Tensor<T>& prev, const Tensor<T>& cur,
                           const BlockState<T>& state) {
  return block.forward(prev, cur, state);
}

enum class ForwardMode { train, infer };

template <class T>
struct ForwardResult {
  std::vector<Tensor<T>> images;  // estimate after each block (block 1 first)
  std::vector<Tensor<T>> flows;   // flow state after each block
  std::vector<std::vector<std::uint8_t>> selected;  // [B][n]
  Tensor<T> final;                // prediction (clamped to [0,1] in infer mode)
};

namespace detail {

template <class T>
Tensor<T> batch_item(const Tensor<T>& x, std::int64_t b) {
  const auto inner = x.numel() / x.dim(0);
  Shape d = x.dims();
  d[0] = 1;
  return Tensor<T>(d, std::vector<T>(x.vec().begin() + b * inner, x.vec().begin() + (b + 1) * inner));
}

template <class T>
Tensor<T> stack_batch(const std::vector<Tensor<T>>& items) {
  Shape d = items.at(0).dims();
  std::vector<T> v;
  v.reserve(static_cast<std::size_t>(items[0].numel()) * items.size());
  for (const auto& t : items) {
    require(t.dims() == items[0].dims(), "stack_batch: dims " + shape_str(t.dims()) + " vs " + shape_str(d));
    v.insert(v.end(), t.vec().begin(), t.vec().end());
  }
  d[0] = static_cast<std::int64_t>(items.size()) * items[0].dim(0);
  return Tensor<T>(d, std::move(v));
}

}  // namespace detail

/// The routed chain of blocks plus its routing network.
template <class T>
class DmvfnModel {
 public:
  explicit DmvfnModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(cfg_.init_seed);
    for (std::size_t i = 0; i < cfg_.schedule.size(); ++i) {
      const int s = cfg_.schedule[i];
      blocks_.push_back(MvfbBlock<T>::make(params_, "block" + std::to_string(i), s, cfg_.width_for(s),
                                           cfg_.spatial_width, cfg_.spatial_path, rng));
    }
    routing_ = RoutingNet<T>::make(params_, "routing", static_cast<int>(cfg_.schedule.size()), cfg_.routing_width,
                                   cfg_.routing_downsample, rng);
  }

  // Handles inside the blocks alias the parameter set; copies would share
  // storage with the original, so copying is disabled.
  DmvfnModel(const DmvfnModel&) = delete;
  DmvfnModel& operator=(const DmvfnModel&) = delete;
  DmvfnModel(DmvfnModel&&) = default;
  DmvfnModel& operator=(DmvfnModel&&) = default;

  const ModelConfig& config() const { return cfg_; }
  std::size_t size() const { return blocks_.size(); }
  const MvfbBlock<T>& block(std::size_t i) const { return blocks_.at(i); }
  const RoutingNet<T>& routing_net() const { return routing_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  /// Same architecture and weights in another scalar type (no optimizer state).
  template <class U>
  DmvfnModel<U> cast() const {
    DmvfnModel<U> out(cfg_);
    for (const auto& p : params_.params()) {
      auto* q = out.params().find(p.name);
      auto dst = q->tensor.mutable_values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<U>(p.tensor.vec()[i]);
    }
    return out;
  }

  /// Runs the chain under routing weights v [B, n].
  ///   infer: block i runs for sample b only when v[b][i] == 1; otherwise the
  ///          state passes through. All-zero rows fall back to `cur`.
  ///   train: every block runs and state_i = v_i * block(state) + (1 - v_i) * state,
  ///          so the routing weights receive gradients.
  ForwardResult<T> forward(const Tensor<T>& prev, const Tensor<T>& cur, const Tensor<T>& v, ForwardMode mode) const {
    detail::require_same(prev.dims(), cur.dims(), "dmvfn_forward");
    detail::require_rank(prev.dims(), 4, "dmvfn_forward", "frame");
    const auto B = prev.dim(0), H = prev.dim(2), W = prev.dim(3);
    const auto n = static_cast<std::int64_t>(blocks_.size());
    if (!v.defined() || v.numel() == 0) throw ConfigError("dmvfn_forward: empty routing vector");
    detail::require(v.rank() == 2 && v.dim(0) == B && v.dim(1) == n,
                    "dmvfn_forward: routing " + shape_str(v.dims()) + " expected [" + std::to_string(B) + "x" +
                        std::to_string(n) + "]");
    ForwardResult<T> res;
    res.selected.assign(static_cast<std::size_t>(B), std::vector<std::uint8_t>(static_cast<std::size_t>(n), 0));
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < n; ++i) res.selected[b][i] = v.vec()[b * n + i] >= T(0.5) ? 1 : 0;

    if (mode == ForwardMode::train) {
      auto state = BlockState<T>::zeros(B, H, W);
      for (std::int64_t i = 0; i < n; ++i) {
        auto out = blocks_[i].forward(prev, cur, state).state;
        const auto vi = select_column(v, i);
        const auto keep = one_minus(vi);
        state.image = add(mul_per_sample(out.image, vi), mul_per_sample(state.image, keep));
        state.flow = add(mul_per_sample(out.flow, vi), mul_per_sample(state.flow, keep));
        res.images.push_back(state.image);
        res.flows.push_back(state.flow);
      }
      res.final = state.image;
      return res;
    }

    for (T e : v.vec())
      if (e != T{0} && e != T{1}) throw ConfigError("dmvfn_forward: non-binary routing value at inference");
    std::vector<std::vector<Tensor<T>>> imgs(static_cast<std::size_t>(n)), flows(static_cast<std::size_t>(n));
    std::vector<Tensor<T>> finals;
    for (std::int64_t b = 0; b < B; ++b) {
      const auto p = B == 1 ? prev : detail::batch_item(prev, b);
      const auto c = B == 1 ? cur : detail::batch_item(cur, b);
      auto state = BlockState<T>::zeros(1, H, W);
      bool any = false;
      for (std::int64_t i = 0; i < n; ++i) {
        if (res.selected[b][i]) {
          state = blocks_[i].forward(p, c, state).state;
          any = true;
        }
        imgs[i].push_back(state.image);
        flows[i].push_back(state.flow);
      }
      finals.push_back(clamp01(any ? state.image : c));
    }
    for (std::int64_t i = 0; i < n; ++i) {
      res.images.push_back(B == 1 ? imgs[i][0] : detail::stack_batch(imgs[i]));
      res.flows.push_back(B == 1 ? flows[i][0] : detail::stack_batch(flows[i]));
    }
    res.final = B == 1 ? finals[0] : detail::stack_batch(finals);
    return res;
  }

 private:
  ModelConfig cfg_;
  ParamSet<T> params_;
  std::vector<MvfbBlock<T>> blocks_;
  RoutingNet<T> routing_;
};

template <class T>
ForwardResult<T> dmvfn_forward(const DmvfnModel<T>& model, const Tensor<T>& prev, const Tensor<T>& cur,
                               const RoutingVector<T>& routing, ForwardMode mode) {
  return model.forward(prev, cur, routing.v, mode);
}

/// Predicts k future frames by feeding each prediction back as the newest
/// input. A fresh routing vector is drawn for every step.
template <class T>
std::vector<Tensor<T>> predict_sequence(const DmvfnModel<T>& model, const Tensor<T>& prev, const Tensor<T>& cur,
                                        int k, const RoutingMode& mode, Rng& rng) {
  if (k < 1) throw ConfigError("predict_sequence: k must be >= 1, got " + std::to_string(k));
  NoGradGuard no_grad;
  std::vector<Tensor<T>> out;
  Tensor<T> a = prev, b = cur;
  for (int j = 0; j < k; ++j) {
    const auto routing = make_routing(mode, model.routing_net(), a, b, Phase::infer, rng);
    auto next = model.forward(a, b, routing.v, ForwardMode::infer).final;
    out.push_back(next);
    a = b;
    b = next;
  }
  return out;
}

}  // namespace dmvfn
