#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "dmvfn/nn.hpp"

namespace dmvfn {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// One AdamW update of a single parameter with gradient `grad`:
///   w <- w - lr * lambda * w, then the bias-corrected Adam step.
template <class T>
void adamw_update(Param<T>& p, std::span<const T> grad, double lr, const AdamWConfig& cfg) {
  auto w = p.tensor.mutable_values();
  if (grad.size() != w.size() || p.first_moment.size() != w.size() || p.second_moment.size() != w.size())
    throw ShapeError("adamw_step: '" + p.name + "' has " + std::to_string(w.size()) + " values but " +
                     std::to_string(grad.size()) + " gradients");
  ++p.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.step));
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    double m = static_cast<double>(p.first_moment[i]), v = static_cast<double>(p.second_moment[i]);
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    p.first_moment[i] = static_cast<T>(m);
    p.second_moment[i] = static_cast<T>(v);
    double x = static_cast<double>(w[i]);
    x -= lr * cfg.weight_decay * x;
    x -= lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
    w[i] = static_cast<T>(x);
  }
}

/// Updates every parameter from its accumulated gradient (missing gradients
/// count as zero, so weight decay still applies).
template <class T>
void adamw_step(ParamSet<T>& params, double lr, const AdamWConfig& cfg) {
  std::vector<T> zeros;
  for (auto& p : params.params()) {
    if (p.tensor.has_grad()) {
      adamw_update(p, p.tensor.grad(), lr, cfg);
    } else {
      zeros.assign(static_cast<std::size_t>(p.tensor.numel()), T{0});
      adamw_update(p, std::span<const T>(zeros), lr, cfg);
    }
  }
}

inline double cosine_lr(std::int64_t step, std::int64_t total, double lr_start, double lr_end) {
  if (total <= 0) throw ConfigError("cosine_lr: total steps must be > 0");
  if (step < 0 || step > total)
    throw ConfigError("cosine_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total) + "]");
  return lr_end + 0.5 * (lr_start - lr_end) *
                      (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

}  // namespace dmvfn
