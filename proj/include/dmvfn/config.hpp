#pragma once

// Training configuration. Stored as a flat JSON object; every key is also a
// command-line flag of the same name.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmvfn/data.hpp"
#include "dmvfn/model.hpp"
#include "dmvfn/objective.hpp"
#include "dmvfn/optim.hpp"
#include "dmvfn/routing.hpp"

namespace dmvfn {

struct TrainConfig {
  // schedule and optimizer
  std::int64_t steps = 3000;
  std::int64_t batch = 8;
  std::int64_t patch = 64;
  double lr_start = 5e-4;
  double lr_end = 1e-5;
  double weight_decay = 1e-4;
  // loss
  double gamma = 0.8;
  int levels = 5;
  std::string supervision = "full";
  // routing
  std::string routing = "stebs";
  double beta = 0.5;
  double p = 0.5;
  double tau_start = 5.0;
  double tau_end = 0.1;
  double gumbel_reg = 0.01;
  bool threshold_inference = false;
  // architecture
  std::vector<int> schedule{4, 4, 4, 2, 2, 2, 1, 1, 1};
  bool spatial_path = true;
  int width_s4 = 64, width_s2 = 48, width_s1 = 32;
  int spatial_width = 8;
  int routing_width = 16;
  int routing_downsample = 4;
  // data; an empty manifest trains on freshly generated moving shapes
  std::string manifest;
  int interval = 1;
  std::int64_t synth_height = 64, synth_width = 64;
  int synth_min_shapes = 2, synth_max_shapes = 4;
  double synth_min_speed = 0.0, synth_max_speed = 6.0;
  std::string synth_background = "gradient";
  // run control
  std::uint64_t seed = 0;
  std::string ckpt = "dmvfn.ckpt";
  std::string log = "train_log.csv";
  std::int64_t ckpt_every = 0;  // 0: only at the end
  std::int64_t stop_at = -1;    // stop early (checkpointing) at this step; -1: run to `steps`
  std::int64_t debug_nan_step = -1;  // test hook: poison the loss at this step

  ModelConfig model_config() const {
    ModelConfig m;
    m.schedule = schedule;
    m.width_s4 = width_s4;
    m.width_s2 = width_s2;
    m.width_s1 = width_s1;
    m.spatial_width = spatial_width;
    m.spatial_path = spatial_path;
    m.routing_width = routing_width;
    m.routing_downsample = routing_downsample;
    m.init_seed = seed;
    return m;
  }

  LossConfig loss_config() const {
    LossConfig l;
    l.gamma = gamma;
    l.levels = levels;
    if (supervision == "full")
      l.supervision = Supervision::full;
    else if (supervision == "single")
      l.supervision = Supervision::single;
    else
      throw ConfigError("supervision must be full or single, got '" + supervision + "'");
    l.gumbel_reg_weight = routing == "gumbel" ? gumbel_reg : 0.0;
    return l;
  }

  RoutingMode routing_mode() const {
    RoutingMode r;
    r.kind = routing_kind_from_string(routing);
    r.beta = beta;
    r.p = p;
    r.tau_start = tau_start;
    r.tau_end = tau_end;
    r.regularizer_weight = gumbel_reg;
    r.threshold_inference = threshold_inference;
    return r;
  }

  AdamWConfig adamw() const {
    AdamWConfig a;
    a.weight_decay = weight_decay;
    return a;
  }

  SynthConfig synth_config() const {
    SynthConfig s;
    s.height = synth_height;
    s.width = synth_width;
    s.min_shapes = synth_min_shapes;
    s.max_shapes = synth_max_shapes;
    s.min_speed = synth_min_speed;
    s.max_speed = synth_max_speed;
    s.background = synth_background;
    s.frames = 2 * interval + 1;
    s.seed = seed;
    return s;
  }

  void validate() const {
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (patch < 2 || patch % 2) throw ConfigError("patch must be even and >= 2");
    if (!(lr_end > 0.0 && lr_start >= lr_end)) throw ConfigError("need lr_start >= lr_end > 0");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (interval < 1) throw ConfigError("interval must be >= 1");
    if (ckpt_every < 0) throw ConfigError("ckpt_every must be >= 0");
    model_config().validate();
    loss_config().validate();
    routing_mode().validate();
    if (manifest.empty()) {
      synth_config().validate();
      if (patch > std::min(synth_height, synth_width)) throw ConfigError("patch larger than the synthetic canvas");
    }
    if (patch < (std::int64_t{1} << (levels - 1))) throw ConfigError("patch too small for the pyramid levels");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return nlohmann::json{
      {"steps", c.steps},
      {"batch", c.batch},
      {"patch", c.patch},
      {"lr_start", c.lr_start},
      {"lr_end", c.lr_end},
      {"weight_decay", c.weight_decay},
      {"gamma", c.gamma},
      {"levels", c.levels},
      {"supervision", c.supervision},
      {"routing", c.routing},
      {"beta", c.beta},
      {"p", c.p},
      {"tau_start", c.tau_start},
      {"tau_end", c.tau_end},
      {"gumbel_reg", c.gumbel_reg},
      {"threshold_inference", c.threshold_inference},
      {"schedule", c.schedule},
      {"spatial_path", c.spatial_path},
      {"width_s4", c.width_s4},
      {"width_s2", c.width_s2},
      {"width_s1", c.width_s1},
      {"spatial_width", c.spatial_width},
      {"routing_width", c.routing_width},
      {"routing_downsample", c.routing_downsample},
      {"manifest", c.manifest},
      {"interval", c.interval},
      {"synth_height", c.synth_height},
      {"synth_width", c.synth_width},
      {"synth_min_shapes", c.synth_min_shapes},
      {"synth_max_shapes", c.synth_max_shapes},
      {"synth_min_speed", c.synth_min_speed},
      {"synth_max_speed", c.synth_max_speed},
      {"synth_background", c.synth_background},
      {"seed", c.seed},
      {"ckpt", c.ckpt},
      {"log", c.log},
      {"ckpt_every", c.ckpt_every},
      {"stop_at", c.stop_at},
      {"debug_nan_step", c.debug_nan_step},
  };
}

namespace detail {

template <class V>
void read_key(const nlohmann::json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace detail

/// Overlays the keys present in `j` onto `c`. Unknown keys are rejected.
inline void apply_json(TrainConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const auto known = to_json(TrainConfig{});
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw ConfigError("unknown config key '" + k + "'");
  detail::read_key(j, "steps", c.steps);
  detail::read_key(j, "batch", c.batch);
  detail::read_key(j, "patch", c.patch);
  detail::read_key(j, "lr_start", c.lr_start);
  detail::read_key(j, "lr_end", c.lr_end);
  detail::read_key(j, "weight_decay", c.weight_decay);
  detail::read_key(j, "gamma", c.gamma);
  detail::read_key(j, "levels", c.levels);
  detail::read_key(j, "supervision", c.supervision);
  detail::read_key(j, "routing", c.routing);
  detail::read_key(j, "beta", c.beta);
  detail::read_key(j, "p", c.p);
  detail::read_key(j, "tau_start", c.tau_start);
  detail::read_key(j, "tau_end", c.tau_end);
  detail::read_key(j, "gumbel_reg", c.gumbel_reg);
  detail::read_key(j, "threshold_inference", c.threshold_inference);
  if (j.contains("schedule")) {
    if (j["schedule"].is_string())
      c.schedule = schedule_from_name(j["schedule"].get<std::string>());
    else
      detail::read_key(j, "schedule", c.schedule);
  }
  detail::read_key(j, "spatial_path", c.spatial_path);
  detail::read_key(j, "width_s4", c.width_s4);
  detail::read_key(j, "width_s2", c.width_s2);
  detail::read_key(j, "width_s1", c.width_s1);
  detail::read_key(j, "spatial_width", c.spatial_width);
  detail::read_key(j, "routing_width", c.routing_width);
  detail::read_key(j, "routing_downsample", c.routing_downsample);
  detail::read_key(j, "manifest", c.manifest);
  detail::read_key(j, "interval", c.interval);
  detail::read_key(j, "synth_height", c.synth_height);
  detail::read_key(j, "synth_width", c.synth_width);
  detail::read_key(j, "synth_min_shapes", c.synth_min_shapes);
  detail::read_key(j, "synth_max_shapes", c.synth_max_shapes);
  detail::read_key(j, "synth_min_speed", c.synth_min_speed);
  detail::read_key(j, "synth_max_speed", c.synth_max_speed);
  detail::read_key(j, "synth_background", c.synth_background);
  detail::read_key(j, "seed", c.seed);
  detail::read_key(j, "ckpt", c.ckpt);
  detail::read_key(j, "log", c.log);
  detail::read_key(j, "ckpt_every", c.ckpt_every);
  detail::read_key(j, "stop_at", c.stop_at);
  detail::read_key(j, "debug_nan_step", c.debug_nan_step);
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  apply_json(c, j);
  return c;
}

inline TrainConfig load_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config '" + file.string() + "'");
  try {
    return config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + file.string() + "': " + e.what());
  }
}

}  // namespace dmvfn
