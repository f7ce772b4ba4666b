#pragma once

// Block routing: a light logits network over the input frame pair, then one
// of four ways of turning the logits into a per-block selection vector.
//
//   always_on  every block runs
//   random     iid Bernoulli(p), ignores the network
//   gumbel     two-class Gumbel-softmax relaxation, soft during training
//   stebs      normalised sample rates w = min(beta * n * sig(v) / sum sig(v), 1),
//              v ~ Bernoulli(w) forward, identity gradient onto w backward

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dmvfn/nn.hpp"
#include "dmvfn/random.hpp"

namespace dmvfn {

enum class RoutingKind { always_on, random, gumbel, stebs };
enum class Phase { train, infer };

inline const char* to_string(RoutingKind k) {
  switch (k) {
    case RoutingKind::always_on: return "always_on";
    case RoutingKind::random: return "random";
    case RoutingKind::gumbel: return "gumbel";
    case RoutingKind::stebs: return "stebs";
  }
  return "?";
}

inline RoutingKind routing_kind_from_string(const std::string& s) {
  if (s == "always_on") return RoutingKind::always_on;
  if (s == "random") return RoutingKind::random;
  if (s == "gumbel") return RoutingKind::gumbel;
  if (s == "stebs") return RoutingKind::stebs;
  throw ConfigError("unknown routing mode '" + s + "' (expected always_on|random|gumbel|stebs)");
}

struct RoutingMode {
  RoutingKind kind = RoutingKind::stebs;
  double beta = 0.5;
  double p = 0.5;
  double tau_start = 5.0;
  double tau_end = 0.1;
  double regularizer_weight = 0.01;
  // STEBS at inference: threshold w >= 0.5 instead of sampling.
  bool threshold_inference = false;

  void validate() const {
    if (!(beta > 0.0)) throw ConfigError("routing beta must be > 0");
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("random routing p must be in [0, 1]");
    if (!(tau_end > 0.0 && tau_start >= tau_end)) throw ConfigError("gumbel temperatures need tau_start >= tau_end > 0");
    if (regularizer_weight < 0.0) throw ConfigError("gumbel regularizer weight must be >= 0");
  }

  /// Exponential decay from tau_start to tau_end over [0, total].
  double tau_at(std::int64_t step, std::int64_t total) const {
    if (total <= 0) return tau_end;
    const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
    return tau_start * std::pow(tau_end / tau_start, t);
  }
};

/// Conv stack over the (downsampled) frame pair, global pooling and a linear
/// head with one logit per block. The head starts at zero.
template <class T>
struct RoutingNet {
  ConvAct<T> conv0, conv1;
  Linear<T> head;
  int downsample = 4;

  static RoutingNet make(ParamSet<T>& ps, const std::string& name, int n_blocks, int width, int downsample,
                         Rng& rng) {
    RoutingNet r;
    r.downsample = downsample;
    r.conv0 = ConvAct<T>::make(ps, name + ".conv0", 6, width, 3, 2, 1, rng);
    r.conv1 = ConvAct<T>::make(ps, name + ".conv1", width, 2 * width, 3, 2, 1, rng);
    r.head = Linear<T>::make(ps, name + ".head", 2 * width, n_blocks, rng, /*zero_init=*/true);
    return r;
  }

  std::int64_t n_blocks() const { return head.weight.dim(0); }
};

/// Routing logits, [B, n].
template <class T>
Tensor<T> routing_logits(const RoutingNet<T>& net, const Tensor<T>& prev, const Tensor<T>& cur) {
  detail::require_same(prev.dims(), cur.dims(), "routing_logits");
  detail::require_rank(prev.dims(), 4, "routing_logits", "frame");
  auto x = concat_channels<T>({prev, cur});
  const auto h = std::max<std::int64_t>(1, prev.dim(2) / net.downsample);
  const auto w = std::max<std::int64_t>(1, prev.dim(3) / net.downsample);
  if (net.downsample > 1) x = bilinear_resize(x, h, w);
  return net.head(global_avg_pool(net.conv1(net.conv0(x))));
}

/// w = min(beta * n * sig(v_i) / sum_j sig(v_j), 1) per row of logits [B, n].
template <class T>
Tensor<T> stebs_normalize(const Tensor<T>& logits, double beta) {
  if (!(beta > 0.0)) throw ConfigError("stebs beta must be > 0");
  detail::require_rank(logits.dims(), 2, "stebs_normalize", "logits");
  const auto B = logits.dim(0), n = logits.dim(1);
  auto sig = std::make_shared<std::vector<T>>(logits.vec().size());
  auto denom = std::make_shared<std::vector<T>>(static_cast<std::size_t>(B));
  std::vector<T> out(logits.vec().size());
  const T scale = static_cast<T>(beta * static_cast<double>(n));
  for (std::int64_t b = 0; b < B; ++b) {
    T s{0};
    for (std::int64_t i = 0; i < n; ++i) s += ((*sig)[b * n + i] = sigmoid_value(logits.vec()[b * n + i]));
    (*denom)[b] = s;
    for (std::int64_t i = 0; i < n; ++i) out[b * n + i] = std::min(scale * (*sig)[b * n + i] / s, T{1});
  }
  auto clamped = std::make_shared<std::vector<T>>(out);
  return detail::record<T>(logits.dims(), std::move(out), "stebs_normalize", {logits},
                           [logits, sig, denom, clamped, scale, B, n](std::span<const T> g) {
                             T* gl = detail::grad_sink(logits);
                             if (!gl) return;
                             for (std::int64_t b = 0; b < B; ++b) {
                               const T S = (*denom)[b];
                               // gradient through the min: zero where the clamp is active
                               T dot{0};
                               for (std::int64_t i = 0; i < n; ++i) {
                                 const auto k = b * n + i;
                                 if ((*clamped)[k] < T{1}) dot += g[k] * (*sig)[k];
                               }
                               for (std::int64_t i = 0; i < n; ++i) {
                                 const auto k = b * n + i;
                                 const T gi = (*clamped)[k] < T{1} ? g[k] : T{0};
                                 const T ds = scale * (gi / S - dot / (S * S));
                                 gl[k] += ds * (*sig)[k] * (T{1} - (*sig)[k]);
                               }
                             }
                           });
}

template <class T>
struct StebsSample {
  Tensor<T> v;      // binary forward values, identity backward onto w
  Tensor<T> probs;  // normalised sample rates w
};

template <class T>
StebsSample<T> stebs_sample(const Tensor<T>& logits, double beta, Rng& rng, bool threshold = false) {
  auto w = stebs_normalize(logits, beta);
  std::vector<T> bits(w.vec().size());
  for (std::size_t i = 0; i < bits.size(); ++i) {
    const double p = static_cast<double>(w.vec()[i]);
    bits[i] = (threshold ? p >= 0.5 : rng.bernoulli(p)) ? T{1} : T{0};
  }
  return {straight_through(std::move(bits), w), w};
}

/// Soft two-class Gumbel routing:
///   v = exp((l+G)/tau) / (exp((l+G)/tau) + exp((2-l-G)/tau)) = sigmoid((2(l+G) - 2) / tau)
/// The sigmoid form is the max-subtracted evaluation of the two-term softmax.
template <class T>
Tensor<T> gumbel_route(const Tensor<T>& logits, const Tensor<T>& noise, double tau) {
  if (!(tau > 0.0)) throw ConfigError("gumbel temperature must be > 0");
  return sigmoid(mul_scalar(add_scalar(add(logits, noise), T{-1}), static_cast<T>(2.0 / tau)));
}

template <class T>
Tensor<T> gumbel_sample(const Tensor<T>& logits, double tau, Rng& rng) {
  if (!(tau > 0.0)) throw ConfigError("gumbel temperature must be > 0");
  std::vector<T> g(logits.vec().size());
  for (auto& e : g) e = static_cast<T>(rng.gumbel());
  return gumbel_route(logits, Tensor<T>(logits.dims(), std::move(g)), tau);
}

template <class T>
struct RoutingVector {
  Tensor<T> logits;  // [B, n]; undefined for network-free modes
  Tensor<T> probs;   // [B, n] normalised rates (stebs) or selection probabilities
  Tensor<T> v;       // [B, n] block weights used by the forward pass
  bool soft = false; // v holds relaxed (non-binary) values

  std::int64_t batch() const { return v.dim(0); }
  std::int64_t size() const { return v.dim(1); }
  bool selected(std::int64_t b, std::int64_t i) const { return v.vec()[b * size() + i] != T{0}; }
};

template <class T>
RoutingVector<T> constant_routing(std::int64_t B, std::int64_t n, T value) {
  RoutingVector<T> r;
  r.v = Tensor<T>(Shape{B, n}, value);
  r.probs = r.v;
  return r;
}

/// Builds the routing vector for a batch of frame pairs. `tau` is the
/// current Gumbel temperature (ignored by other modes).
template <class T>
RoutingVector<T> make_routing(const RoutingMode& mode, const RoutingNet<T>& net, const Tensor<T>& prev,
                              const Tensor<T>& cur, Phase phase, Rng& rng, double tau = -1.0) {
  mode.validate();
  const auto B = prev.dim(0), n = net.n_blocks();
  switch (mode.kind) {
    case RoutingKind::always_on:
      return constant_routing<T>(B, n, T{1});
    case RoutingKind::random: {
      RoutingVector<T> r;
      std::vector<T> bits(static_cast<std::size_t>(B * n));
      for (auto& e : bits) e = rng.bernoulli(mode.p) ? T{1} : T{0};
      r.v = Tensor<T>(Shape{B, n}, std::move(bits));
      r.probs = Tensor<T>(Shape{B, n}, static_cast<T>(mode.p));
      return r;
    }
    case RoutingKind::gumbel: {
      RoutingVector<T> r;
      r.logits = routing_logits(net, prev, cur);
      const double t = tau > 0.0 ? tau : mode.tau_end;
      if (phase == Phase::train) {
        r.v = gumbel_sample(r.logits, t, rng);
        r.probs = r.v;
        r.soft = true;
      } else {
        // noise-free relaxation, thresholded: selected iff logit >= 1
        const auto soft = gumbel_route(r.logits, Tensor<T>(r.logits.dims(), T{0}), t);
        std::vector<T> bits(soft.vec().size());
        for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = soft.vec()[i] >= T(0.5) ? T{1} : T{0};
        r.probs = soft;
        r.v = Tensor<T>(soft.dims(), std::move(bits));
      }
      return r;
    }
    case RoutingKind::stebs: {
      RoutingVector<T> r;
      r.logits = routing_logits(net, prev, cur);
      auto s = stebs_sample(r.logits, mode.beta, rng, phase == Phase::infer && mode.threshold_inference);
      r.v = s.v;
      r.probs = s.probs;
      return r;
    }
  }
  throw ConfigError("invalid routing mode");
}

}  // namespace dmvfn
