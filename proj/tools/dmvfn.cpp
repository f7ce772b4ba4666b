// dmvfn command-line front end.
//
//   dmvfn train --config cfg.json [--seed N] [--resume ckpt] [--<key> value ...]
//   dmvfn predict --ckpt path --frames dir --k 5 --beta 0.5 --out dir
//   dmvfn eval --ckpt path --manifest m.json --horizons 1,3,5 [--out report.csv]
//   dmvfn flops --ckpt path --beta B [--manifest m.json]
//   dmvfn route-stats --ckpt path --manifest m.json [--by subset|motion|interval]
//   dmvfn synth --out dir --clips N [--frames 7]
//
// Exit codes: 0 ok, 1 usage, 2 data, 3 numeric failure.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "dmvfn/dmvfn.hpp"

namespace {

using namespace dmvfn;

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

std::vector<int> parse_horizons(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ConfigError("bad horizon list '" + s + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty horizon list");
  return out;
}

// Routing used at inference: the checkpoint's settings with optional overrides.
RoutingMode inference_mode(const TrainConfig& cfg, const std::string& routing, double beta) {
  auto c = cfg;
  if (!routing.empty()) c.routing = routing;
  if (beta > 0) c.beta = beta;
  auto m = c.routing_mode();
  m.validate();
  return m;
}

struct Loaded {
  TrainConfig cfg;
  DmvfnModel<float> model;
};

Loaded load_model(const std::string& path) {
  auto [cfg, model] = model_from_checkpoint(load_checkpoint(path));
  return {cfg, std::move(model)};
}

int run_train(const std::string& config_path, const std::map<std::string, std::string>& overrides,
              const std::string& resume) {
  TrainConfig cfg;
  if (!config_path.empty()) cfg = load_config(config_path);
  const auto defaults = to_json(TrainConfig{});
  nlohmann::json patch = nlohmann::json::object();
  for (const auto& [key, text] : overrides) {
    if (defaults.at(key).is_string() || key == "schedule") {
      patch[key] = text;
    } else {
      try {
        patch[key] = nlohmann::json::parse(text);
      } catch (const nlohmann::json::parse_error&) {
        throw ConfigError("--" + key + ": cannot parse '" + text + "'");
      }
    }
  }
  apply_json(cfg, patch);
  cfg.validate();
  std::fprintf(stderr, "training %lld steps, routing %s, checkpoint %s\n", static_cast<long long>(cfg.steps),
               cfg.routing.c_str(), cfg.ckpt.c_str());
  const auto res = train(cfg, resume.empty() ? std::nullopt : std::optional<std::filesystem::path>(resume),
                         [&](const LogRow& r) {
                           if (r.step % 100 == 0 || r.step + 1 == cfg.steps)
                             std::fprintf(stderr, "step %lld  lr %.3g  loss %.5f  sum_w %.3f\n",
                                          static_cast<long long>(r.step), r.lr, r.loss, r.mean_w_sum);
                         });
  std::fprintf(stderr, "done at step %lld\n", static_cast<long long>(res.last_step));
  return kOk;
}

int run_predict(const std::string& ckpt, const std::string& frames, int k, double beta, const std::string& routing,
                const std::string& out, std::uint64_t seed) {
  auto [cfg, model] = load_model(ckpt);
  const auto clip = load_sequence(frames);
  if (clip.frames.size() < 2) throw DataError("'" + frames + "' needs at least two frames");
  const auto n = clip.frames.size();
  Rng rng(seed);
  const auto preds =
      predict_sequence(model, clip.frames[n - 2], clip.frames[n - 1], k, inference_mode(cfg, routing, beta), rng);
  save_frames(preds, out);
  std::printf("wrote %d frames to %s\n", k, out.c_str());
  return kOk;
}

int run_eval(const std::string& ckpt, const std::string& manifest, const std::string& horizons_text, double beta,
             const std::string& routing, const std::string& out, std::uint64_t seed) {
  auto [cfg, model] = load_model(ckpt);
  const auto clips = load_manifest(manifest);
  const auto horizons = parse_horizons(horizons_text);
  Rng rng(seed);
  auto report = evaluate_model(model, clips, horizons, inference_mode(cfg, routing, beta), rng);
  report.merge(copy_last_baseline(clips, horizons), "copy_last_");
  if (out.empty()) {
    report.write_csv(std::cout);
  } else {
    std::ofstream os(out);
    if (!os) throw DataError("cannot write '" + out + "'");
    report.write_csv(os);
    report.write_text(std::cout);
  }
  return kOk;
}

std::vector<ClipRecord> clips_or_synthetic(const std::string& manifest, const TrainConfig& cfg, std::uint64_t seed) {
  if (!manifest.empty()) return load_manifest(manifest);
  auto s = cfg.synth_config();
  s.frames = 2;
  s.seed = seed + 1000003;
  return gen_moving_shapes(s, 64);
}

int run_flops(const std::string& ckpt, double beta, const std::string& routing, const std::string& manifest,
              std::uint64_t seed) {
  auto [cfg, model] = load_model(ckpt);
  const auto clips = clips_or_synthetic(manifest, cfg, seed);
  Rng rng(seed);
  const auto rep = flops_report(model, clips, inference_mode(cfg, routing, beta), rng);
  const auto& L = rep.ledger;
  std::printf("frame %lldx%lld, %lld samples\n", static_cast<long long>(L.height), static_cast<long long>(L.width),
              static_cast<long long>(rep.n));
  std::printf("item,scale,flops,mean_w\n");
  for (std::size_t i = 0; i < L.blocks.size(); ++i)
    std::printf("block%zu,%d,%.0f,%.4f\n", i + 1, cfg.schedule[i], L.block_total(i), rep.mean_probs[i]);
  std::printf("routing,,%.0f,\n", L.routing_total());
  std::printf("static_total,,%.0f,\n", L.static_total());
  std::printf("expected_total,,%.0f,\n", rep.expected_total);
  std::printf("sampled_total,,%.0f,\n", rep.sampled_total);
  return kOk;
}

int run_route_stats(const std::string& ckpt, const std::string& manifest, const std::string& by,
                    const std::string& routing, double beta, int repeats, std::uint64_t seed) {
  auto [cfg, model] = load_model(ckpt);
  const auto clips = load_manifest(manifest);
  Rng rng(seed);
  const auto st =
      usage_rate(model, clips, inference_mode(cfg, routing, beta), rng, usage_key_from_string(by), repeats);
  st.write_csv(std::cout);
  return kOk;
}

int run_synth(const std::string& out, int clips, int frames, std::int64_t size, double max_speed,
              std::uint64_t seed) {
  SynthConfig s;
  s.height = s.width = size;
  s.frames = frames;
  s.max_speed = max_speed;
  s.seed = seed;
  const auto data = gen_moving_shapes(s, static_cast<std::size_t>(clips));
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < data.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "clip%05zu", i);
    save_frames(data[i].frames, std::filesystem::path(out) / name);
    entries.push_back({name, data[i].meta.motion_bin, data[i].meta.max_speed});
  }
  write_manifest(entries, std::filesystem::path(out) / "manifest.json");
  std::printf("wrote %d clips and %s\n", clips, (std::filesystem::path(out) / "manifest.json").c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic multi-scale voxel flow network: training, prediction and evaluation"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model");
  std::string config_path, resume;
  train_cmd->add_option("--config", config_path, "JSON config file");
  train_cmd->add_option("--resume", resume, "continue from this checkpoint");
  std::map<std::string, std::string> overrides;
  const auto config_keys = to_json(TrainConfig{});
  for (const auto& [key, value] : config_keys.items()) {
    const std::string k = key;
    train_cmd->add_option_function<std::string>(
        "--" + k, [&overrides, k](const std::string& v) { overrides[k] = v; }, "overrides config key " + k);
  }

  // shared inference options
  std::string ckpt, manifest, routing, out;
  double beta = -1;
  std::uint64_t seed = 0;

  auto* predict_cmd = app.add_subcommand("predict", "extrapolate k frames from the last two frames of a folder");
  std::string frames;
  int k = 5;
  predict_cmd->add_option("--ckpt", ckpt)->required();
  predict_cmd->add_option("--frames", frames)->required();
  predict_cmd->add_option("--k", k)->check(CLI::PositiveNumber);
  predict_cmd->add_option("--beta", beta);
  predict_cmd->add_option("--routing", routing);
  predict_cmd->add_option("--out", out)->required();
  predict_cmd->add_option("--seed", seed);

  auto* eval_cmd = app.add_subcommand("eval", "MS-SSIM / PSNR at several horizons, with the copy-last baseline");
  std::string horizons = "1,3,5";
  eval_cmd->add_option("--ckpt", ckpt)->required();
  eval_cmd->add_option("--manifest", manifest)->required();
  eval_cmd->add_option("--horizons", horizons);
  eval_cmd->add_option("--beta", beta);
  eval_cmd->add_option("--routing", routing);
  eval_cmd->add_option("--out", out, "CSV path (default: CSV on stdout)");
  eval_cmd->add_option("--seed", seed);

  auto* flops_cmd = app.add_subcommand("flops", "static and routed FLOPs");
  flops_cmd->add_option("--ckpt", ckpt)->required();
  flops_cmd->add_option("--beta", beta);
  flops_cmd->add_option("--routing", routing);
  flops_cmd->add_option("--manifest", manifest, "frames to route (default: generated shapes)");
  flops_cmd->add_option("--seed", seed);

  auto* stats_cmd = app.add_subcommand("route-stats", "per-block usage rates");
  std::string by = "subset";
  int repeats = 1;
  stats_cmd->add_option("--ckpt", ckpt)->required();
  stats_cmd->add_option("--manifest", manifest)->required();
  stats_cmd->add_option("--by", by)->check(CLI::IsMember({"subset", "motion", "interval"}));
  stats_cmd->add_option("--mode,--routing", routing);
  stats_cmd->add_option("--beta", beta);
  stats_cmd->add_option("--repeats", repeats)->check(CLI::PositiveNumber);
  stats_cmd->add_option("--seed", seed);

  auto* synth_cmd = app.add_subcommand("synth", "write a moving-shapes dataset and manifest");
  int clips = 16, synth_frames = 7;
  std::int64_t size = 64;
  double max_speed = 6.0;
  synth_cmd->add_option("--out", out)->required();
  synth_cmd->add_option("--clips", clips)->check(CLI::PositiveNumber);
  synth_cmd->add_option("--frames", synth_frames)->check(CLI::PositiveNumber);
  synth_cmd->add_option("--size", size);
  synth_cmd->add_option("--max-speed", max_speed);
  synth_cmd->add_option("--seed", seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*train_cmd) return run_train(config_path, overrides, resume);
    if (*predict_cmd) return run_predict(ckpt, frames, k, beta, routing, out, seed);
    if (*eval_cmd) return run_eval(ckpt, manifest, horizons, beta, routing, out, seed);
    if (*flops_cmd) return run_flops(ckpt, beta, routing, manifest, seed);
    if (*stats_cmd) return run_route_stats(ckpt, manifest, by, routing, beta, repeats, seed);
    if (*synth_cmd) return run_synth(out, clips, synth_frames, size, max_speed, seed);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kData;
  }
  return kUsage;
}
