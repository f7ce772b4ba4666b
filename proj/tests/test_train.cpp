#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "oracles.hpp"

using namespace dmvfn;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dmvfn_train_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TrainConfig tiny_run(const fs::path& dir, std::int64_t steps) {
  TrainConfig c;
  c.steps = steps;
  c.batch = 2;
  c.patch = 16;
  c.levels = 3;
  c.width_s4 = c.width_s2 = c.width_s1 = 8;
  c.spatial_width = 4;
  c.routing_width = 4;
  c.synth_height = c.synth_width = 32;
  c.synth_max_speed = 3;
  c.seed = 7;
  c.ckpt = (dir / "model.ckpt").string();
  c.log = (dir / "log.csv").string();
  return c;
}

}  // namespace

TEST(AdamW, ZeroGradientNoDecayIsNoOp) {
  Param<double> p{"w", Tensor<double>(Shape{3}, {1.0, -2.0, 0.5}), {0, 0, 0}, {0, 0, 0}, 0};
  AdamWConfig cfg;
  cfg.weight_decay = 0;
  std::vector<double> g(3, 0.0);
  adamw_update(p, std::span<const double>(g), 0.01, cfg);
  EXPECT_EQ(p.tensor.vec(), (std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(AdamW, DecoupledDecay) {
  Param<double> p{"w", Tensor<double>(Shape{2}, {1.0, -3.0}), {0, 0}, {0, 0}, 0};
  AdamWConfig cfg;
  cfg.weight_decay = 0.1;
  std::vector<double> g(2, 0.0);
  adamw_update(p, std::span<const double>(g), 0.01, cfg);
  EXPECT_DOUBLE_EQ(p.tensor.vec()[0], 0.999);
  EXPECT_DOUBLE_EQ(p.tensor.vec()[1], -3 * 0.999);
}

TEST(AdamW, ScalarOracleTrajectory) {
  for (double g : {0.3, -1.7}) {
    Param<double> p{"w", Tensor<double>(Shape{1}, 0.8), {0}, {0}, 0};
    oracle::ScalarAdamW ref(0.8, 1e-2);
    AdamWConfig cfg;
    cfg.weight_decay = 1e-2;
    for (int t = 0; t < 200; ++t) {
      const double lr = cosine_lr(t, 200, 1e-2, 1e-3);
      std::vector<double> grad{g};
      adamw_update(p, std::span<const double>(grad), lr, cfg);
      ref.step(g, lr);
      ASSERT_NEAR(p.tensor.vec()[0], ref.w, 1e-6) << t;
    }
  }
}

TEST(AdamW, ShapeMismatch) {
  Param<double> p{"w", Tensor<double>(Shape{2}), {0, 0}, {0, 0}, 0};
  std::vector<double> g(3);
  EXPECT_THROW(adamw_update(p, std::span<const double>(g), 0.1, AdamWConfig{}), ShapeError);
}

TEST(CosineLr, Endpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 1000, 1e-4, 1e-5), 1e-4);
  EXPECT_NEAR(cosine_lr(1000, 1000, 1e-4, 1e-5), 1e-5, 1e-18);
  EXPECT_NEAR(cosine_lr(500, 1000, 1e-4, 1e-5), 5.5e-5, 1e-18);
  EXPECT_THROW(cosine_lr(0, 0, 1e-4, 1e-5), ConfigError);
  EXPECT_THROW(cosine_lr(11, 10, 1e-4, 1e-5), ConfigError);
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
  TrainConfig c;
  c.steps = 17;
  c.routing = "gumbel";
  c.schedule = schedule_from_name("[2,1]");
  const auto back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(config_from_json(nlohmann::json{{"stepz", 3}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"steps", "many"}}), ConfigError);
  EXPECT_EQ(config_from_json(nlohmann::json{{"schedule", "[1]"}}).schedule, std::vector<int>(9, 1));
  TrainConfig bad;
  bad.lr_end = 1;
  bad.lr_start = 0.1;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = {};
  bad.batch = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto dir = scratch("ckpt");
  auto cfg = tiny_run(dir, 3);
  train(cfg);
  const auto ck = load_checkpoint(cfg.ckpt);
  EXPECT_EQ(ck.step, 3);
  auto [cfg2, model] = model_from_checkpoint(ck);
  EXPECT_EQ(to_json(cfg2), to_json(cfg));
  save_checkpoint(ck, dir / "again.ckpt");
  EXPECT_TRUE(slurp(cfg.ckpt) == slurp(dir / "again.ckpt"));
  // the model rebuilt from the checkpoint exports exactly the stored tensors
  Checkpoint ck2 = ck;
  ck2.params = export_params(model.params());
  save_checkpoint(ck2, dir / "third.ckpt");
  EXPECT_TRUE(slurp(cfg.ckpt) == slurp(dir / "third.ckpt"));
  fs::remove_all(dir);
}

TEST(Checkpoint, RejectsVersionMismatchAndGarbage) {
  const auto dir = scratch("version");
  Checkpoint ck;
  ck.version = kCheckpointVersion + 1;
  save_checkpoint(ck, dir / "v.ckpt");
  try {
    load_checkpoint(dir / "v.ckpt");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  std::ofstream(dir / "junk.ckpt") << "hello";
  EXPECT_THROW(load_checkpoint(dir / "junk.ckpt"), DataError);
  ck.version = kCheckpointVersion;
  save_checkpoint(ck, dir / "ok.ckpt");
  auto bytes = slurp(dir / "ok.ckpt");
  std::ofstream(dir / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  EXPECT_THROW(load_checkpoint(dir / "short.ckpt"), DataError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), DataError);
  fs::remove_all(dir);
}

TEST(Checkpoint, LittleEndianLayout) {
  Checkpoint ck;
  ck.config_json = "{}";
  ck.params.push_back({"w", {2}, {1.0f, -2.0f}, {0, 0}, {0, 0}, 5});
  ck.step = 258;
  std::ostringstream os;
  write_checkpoint(ck, os);
  const auto s = os.str();
  EXPECT_EQ(s.substr(0, 4), "DMVF");
  EXPECT_EQ(static_cast<unsigned char>(s[4]), kCheckpointVersion);
  // trailing step counter, little-endian 258 = 0x0102
  EXPECT_EQ(static_cast<unsigned char>(s[s.size() - 8]), 0x02);
  EXPECT_EQ(static_cast<unsigned char>(s[s.size() - 7]), 0x01);
  // 1.0f = 0x3f800000 -> 00 00 80 3f
  const auto pos = s.find(std::string("\x00\x00\x80\x3f", 4));
  EXPECT_NE(pos, std::string::npos);
}

TEST(Checkpoint, ImportRejectsMismatchedModel) {
  DmvfnModel<float> a(tiny_run(".", 1).model_config());
  auto cfg = tiny_run(".", 1);
  cfg.width_s1 = 12;
  DmvfnModel<float> b(cfg.model_config());
  EXPECT_THROW(import_params(b.params(), export_params(a.params())), DataError);
}

TEST(Train, ZeroStepsCheckpointIsInitialisation) {
  const auto dir = scratch("zero");
  auto cfg = tiny_run(dir, 0);
  const auto res = train(cfg);
  EXPECT_TRUE(res.rows.empty());
  const auto ck = load_checkpoint(cfg.ckpt);
  DmvfnModel<float> fresh(cfg.model_config());
  const auto init = export_params(fresh.params());
  ASSERT_EQ(ck.params.size(), init.size());
  for (std::size_t i = 0; i < init.size(); ++i) EXPECT_EQ(ck.params[i].values, init[i].values) << init[i].name;
  EXPECT_TRUE(slurp(cfg.log) == std::string(kTrainLogHeader) + "\n");
  fs::remove_all(dir);
}

TEST(Train, SameSeedByteIdenticalLogs) {
  const auto dir = scratch("det");
  auto cfg = tiny_run(dir, 6);
  train(cfg);
  const auto first = slurp(cfg.log);
  const auto ck1 = slurp(cfg.ckpt);
  train(cfg);
  EXPECT_TRUE(slurp(cfg.log) == first);
  EXPECT_TRUE(slurp(cfg.ckpt) == ck1);
  EXPECT_EQ(first.substr(0, first.find('\n')), "step,lr,loss,mean_w_sum,selected_blocks_mean");
  std::istringstream in(first);
  std::string line;
  int rows = -1;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 6);
  cfg.seed = 8;
  train(cfg);
  EXPECT_NE(slurp(cfg.log), first);
  fs::remove_all(dir);
}

TEST(Train, ResumeContinuesLogExactly) {
  const auto dir = scratch("resume");
  auto cfg = tiny_run(dir, 8);
  train(cfg);
  const auto full_log = slurp(cfg.log), full_ckpt = slurp(cfg.ckpt);

  cfg.stop_at = 4;
  train(cfg);
  EXPECT_EQ(load_checkpoint(cfg.ckpt).step, 4);
  cfg.stop_at = -1;
  train(cfg, fs::path(cfg.ckpt));
  EXPECT_TRUE(slurp(cfg.log) == full_log);
  EXPECT_TRUE(slurp(cfg.ckpt) == full_ckpt);
  fs::remove_all(dir);
}

TEST(Train, PeriodicCheckpointThenResume) {
  const auto dir = scratch("periodic");
  auto cfg = tiny_run(dir, 6);
  train(cfg);
  const auto full_log = slurp(cfg.log);
  cfg.ckpt_every = 2;
  cfg.stop_at = 3;  // stops at 3; the periodic checkpoint at 2 was overwritten by the stop
  train(cfg);
  cfg.stop_at = -1;
  train(cfg, fs::path(cfg.ckpt));
  EXPECT_TRUE(slurp(cfg.log) == full_log);
  fs::remove_all(dir);
}

TEST(Train, NanLossAbortsKeepingLastGoodCheckpoint) {
  const auto dir = scratch("nan");
  auto cfg = tiny_run(dir, 6);
  cfg.ckpt_every = 2;
  cfg.debug_nan_step = 3;
  EXPECT_THROW(train(cfg), NumericError);
  const auto ck = load_checkpoint(cfg.ckpt);
  EXPECT_EQ(ck.step, 2);
  for (const auto& p : ck.params)
    for (float v : p.values) ASSERT_TRUE(std::isfinite(v));
  fs::remove_all(dir);
}

TEST(Train, LossDecreasesOnShortRun) {
  const auto dir = scratch("learn");
  auto cfg = tiny_run(dir, 400);
  cfg.log = "";
  cfg.lr_start = 1e-3;
  const auto res = train(cfg);
  double head = 0, tail = 0;
  for (int i = 0; i < 50; ++i) {
    head += res.rows[i].loss;
    tail += res.rows[res.rows.size() - 1 - i].loss;
  }
  EXPECT_LT(tail, head);
  fs::remove_all(dir);
}

TEST(Train, ManifestData) {
  const auto dir = scratch("manifest");
  SynthConfig s;
  s.height = s.width = 32;
  s.max_size = 12;
  s.frames = 5;
  const auto data = gen_moving_shapes(s, 3);
  std::vector<ManifestEntry> entries;
  for (int i = 0; i < 3; ++i) {
    save_frames(data[i].frames, dir / ("c" + std::to_string(i)));
    entries.push_back({"c" + std::to_string(i), "", -1});
  }
  write_manifest(entries, dir / "m.json");
  auto cfg = tiny_run(dir, 3);
  cfg.manifest = (dir / "m.json").string();
  cfg.interval = 2;
  EXPECT_EQ(train(cfg).last_step, 3);
  cfg.interval = 3;  // needs 7 frames
  EXPECT_THROW(train(cfg), DataError);
  fs::remove_all(dir);
}
