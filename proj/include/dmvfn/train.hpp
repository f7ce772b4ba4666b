#pragma once

// The training loop: patches -> routed forward -> pyramid loss -> AdamW,
// with a CSV log and resumable checkpoints.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "dmvfn/checkpoint.hpp"
#include "dmvfn/config.hpp"
#include "dmvfn/image_io.hpp"

namespace dmvfn {

inline constexpr const char* kTrainLogHeader = "step,lr,loss,mean_w_sum,selected_blocks_mean";

struct LogRow {
  std::int64_t step = 0;
  double lr = 0, loss = 0, mean_w_sum = 0, selected_blocks_mean = 0;

  std::string csv() const {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%" PRId64 ",%.9g,%.9g,%.9g,%.9g", step, lr, loss, mean_w_sum,
                  selected_blocks_mean);
    return buf;
  }
};

/// Draws training triplets (prev, cur, target) as patches.
class BatchSampler {
 public:
  BatchSampler(const TrainConfig& cfg, std::vector<ClipRecord> clips) : cfg_(cfg), clips_(std::move(clips)) {
    const auto need = static_cast<std::size_t>(2 * cfg_.interval + 1);
    for (const auto& c : clips_) {
      validate_clip(c, need);
      if (std::min(c.height(), c.width()) < cfg_.patch)
        throw DataError("clip '" + c.meta.source + "' is smaller than the patch size");
    }
  }

  /// Three [B, 3, patch, patch] tensors.
  std::array<Frame, 3> next(Rng& rng) const {
    std::array<std::vector<Frame>, 3> parts;
    for (std::int64_t b = 0; b < cfg_.batch; ++b) {
      ClipRecord triplet;
      if (clips_.empty()) {
        triplet = interval_subsample(random_clip(cfg_.synth_config(), rng), cfg_.interval);
      } else {
        const auto& c = clips_[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(clips_.size()) - 1))];
        const auto span = 2 * cfg_.interval;
        const auto start = rng.uniform_int(0, static_cast<std::int64_t>(c.frames.size()) - 1 - span);
        triplet.meta = c.meta;
        for (int k = 0; k < 3; ++k)
          triplet.frames.push_back(c.frames[static_cast<std::size_t>(start + k * cfg_.interval)]);
      }
      auto patch = sample_patch(triplet, cfg_.patch, rng);
      for (int k = 0; k < 3; ++k) parts[k].push_back(patch.frames[k]);
    }
    return {stack_frames(parts[0]), stack_frames(parts[1]), stack_frames(parts[2])};
  }

 private:
  TrainConfig cfg_;
  std::vector<ClipRecord> clips_;
};

struct TrainResult {
  std::vector<LogRow> rows;  // rows produced by this call
  std::int64_t last_step = 0;  // steps completed
};

inline Checkpoint make_checkpoint(const TrainConfig& cfg, const DmvfnModel<float>& model, const Rng& rng,
                                  std::int64_t step) {
  Checkpoint ck;
  ck.config_json = to_json(cfg).dump();
  ck.params = export_params(model.params());
  ck.rng_state = rng.state();
  ck.step = step;
  return ck;
}

/// Rebuilds a model (and its config) from a checkpoint.
inline std::pair<TrainConfig, DmvfnModel<float>> model_from_checkpoint(const Checkpoint& ck) {
  TrainConfig cfg;
  try {
    cfg = config_from_json(nlohmann::json::parse(ck.config_json));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  DmvfnModel<float> model(cfg.model_config());
  import_params(model.params(), ck.params);
  return {cfg, std::move(model)};
}

namespace detail {

// Keeps the header and the rows for steps < `keep`; used on resume.
inline void truncate_log(const std::filesystem::path& path, std::int64_t keep) {
  std::vector<std::string> lines;
  {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
  }
  std::ofstream out(path, std::ios::trunc);
  out << kTrainLogHeader << "\n";
  for (std::size_t i = 1; i < lines.size() && static_cast<std::int64_t>(i) <= keep; ++i) out << lines[i] << "\n";
}

}  // namespace detail

/// Trains per `cfg`. With `resume`, parameters, optimizer moments, RNG and
/// step come from that checkpoint and the log is continued in place. A
/// non-finite loss throws NumericError before any parameter update, leaving
/// the last written checkpoint untouched.
inline TrainResult train(const TrainConfig& cfg, const std::optional<std::filesystem::path>& resume = std::nullopt,
                         const std::function<void(const LogRow&)>& on_row = {}) {
  cfg.validate();
  std::vector<ClipRecord> clips;
  if (!cfg.manifest.empty()) clips = load_manifest(cfg.manifest);
  const BatchSampler sampler(cfg, std::move(clips));

  DmvfnModel<float> model(cfg.model_config());
  Rng rng(cfg.seed);
  std::int64_t start = 0;
  if (resume) {
    const auto ck = load_checkpoint(*resume);
    import_params(model.params(), ck.params);
    rng.set_state(ck.rng_state);
    start = ck.step;
    if (start > cfg.steps) throw ConfigError("checkpoint step exceeds configured steps");
  }
  const std::int64_t end = cfg.stop_at >= 0 ? std::min(cfg.stop_at, cfg.steps) : cfg.steps;

  std::ofstream log;
  if (!cfg.log.empty()) {
    if (resume && std::filesystem::exists(cfg.log)) {
      detail::truncate_log(cfg.log, start);
      log.open(cfg.log, std::ios::app);
    } else {
      log.open(cfg.log, std::ios::trunc);
      log << kTrainLogHeader << "\n";
    }
    if (!log) throw DataError("cannot write training log '" + cfg.log + "'");
  }
  auto save = [&](std::int64_t step) {
    if (!cfg.ckpt.empty()) save_checkpoint(make_checkpoint(cfg, model, rng, step), cfg.ckpt);
  };
  if (!resume) save(0);

  const auto mode = cfg.routing_mode();
  const auto loss_cfg = cfg.loss_config();
  const auto opt = cfg.adamw();
  TrainResult res;
  res.last_step = start;
  for (std::int64_t step = start; step < end; ++step) {
    const auto [prev, cur, target] = sampler.next(rng);
    const double lr = cosine_lr(step, std::max<std::int64_t>(cfg.steps, 1), cfg.lr_start, cfg.lr_end);
    const double tau = mode.tau_at(step, cfg.steps);
    const auto routing = make_routing(mode, model.routing_net(), prev, cur, Phase::train, rng, tau);
    const auto fwd = model.forward(prev, cur, routing.v, ForwardMode::train);
    auto loss = total_loss(fwd.images, target, loss_cfg, routing.soft ? &routing.v : nullptr);

    double loss_value = static_cast<double>(loss.item());
    if (step == cfg.debug_nan_step) loss_value = std::numeric_limits<double>::quiet_NaN();
    if (!std::isfinite(loss_value))
      throw NumericError("non-finite loss at step " + std::to_string(step) + "; last good checkpoint kept at '" +
                         cfg.ckpt + "'");

    model.params().zero_grad();
    backward(loss);
    adamw_step(model.params(), lr, opt);

    LogRow row;
    row.step = step;
    row.lr = lr;
    row.loss = loss_value;
    const auto B = routing.batch(), n = routing.size();
    double wsum = 0.0, sel = 0.0;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < n; ++i) {
        wsum += static_cast<double>(routing.probs.vec()[b * n + i]);
        sel += routing.v.vec()[b * n + i] >= 0.5f ? 1.0 : 0.0;
      }
    row.mean_w_sum = wsum / static_cast<double>(B);
    row.selected_blocks_mean = sel / static_cast<double>(B);
    if (log) log << row.csv() << "\n" << std::flush;
    if (on_row) on_row(row);
    res.rows.push_back(row);
    res.last_step = step + 1;
    if (cfg.ckpt_every > 0 && (step + 1) % cfg.ckpt_every == 0 && step + 1 < end) save(step + 1);
  }
  save(res.last_step);
  return res;
}

}  // namespace dmvfn
