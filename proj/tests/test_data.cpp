#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "oracles.hpp"

using namespace dmvfn;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dmvfn_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SynthConfig one_rectangle(double vx, double vy) {
  SynthConfig s;
  s.frames = 5;
  s.background = "flat";
  ShapeSpec r;
  r.kind = ShapeKind::rectangle;
  r.x = 20;
  r.y = 24;
  r.w = 10;
  r.h = 8;
  r.vx = vx;
  r.vy = vy;
  r.color = {0.9f, 0.2f, 0.4f};
  s.shapes = std::vector<ShapeSpec>{r};
  return s;
}

}  // namespace

TEST(Synth, ZeroVelocityFramesIdentical) {
  SynthConfig s;
  s.max_speed = 0;
  s.frames = 4;
  for (const auto& c : gen_moving_shapes(s, 3)) {
    for (const auto& f : c.frames) EXPECT_EQ(f.vec(), c.frames[0].vec());
    EXPECT_EQ(c.meta.motion_bin, "slow");
  }
}

TEST(Synth, SameSeedSameBytes) {
  SynthConfig s;
  s.seed = 42;
  const auto a = gen_moving_shapes(s, 4), b = gen_moving_shapes(s, 4);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].frames.size(); ++j) EXPECT_EQ(a[i].frames[j].vec(), b[i].frames[j].vec());
  s.seed = 43;
  EXPECT_NE(gen_moving_shapes(s, 1)[0].frames[0].vec(), a[0].frames[0].vec());
}

TEST(Synth, IntegerVelocityIsExactShift) {
  const auto clip = gen_moving_shapes(one_rectangle(2, 0), 1)[0];
  for (int j = 1; j < 5; ++j) EXPECT_TRUE(oracle::shifted_equal(clip.frames[0], clip.frames[j], 2 * j, 0, 0, 0.0)) << j;
  const auto down = gen_moving_shapes(one_rectangle(0, -3), 1)[0];
  EXPECT_TRUE(oracle::shifted_equal(down.frames[0], down.frames[2], 0, -6, 0, 0.0));
}

TEST(Synth, PositionsClampAtEdges) {
  auto cfg = one_rectangle(6, 0);
  cfg.frames = 12;
  const auto clip = gen_moving_shapes(cfg, 1)[0];
  // once clamped against the right edge the shape stops moving
  EXPECT_EQ(clip.frames[10].vec(), clip.frames[11].vec());
  const auto& last = clip.frames[11];
  EXPECT_NEAR(last.at(0, 0, 25, 63), 0.9f, 1e-6);
}

TEST(Synth, DisksAreAntiAliased) {
  SynthConfig s;
  s.background = "flat";
  ShapeSpec d;
  d.kind = ShapeKind::disk;
  d.x = 32.3;
  d.y = 31.7;
  d.w = 14;
  d.color = {1, 1, 1};
  s.shapes = std::vector<ShapeSpec>{d};
  s.frames = 1;
  const auto f = gen_moving_shapes(s, 1)[0].frames[0];
  const float bg = f.at(0, 0, 0, 0);
  int partial = 0;
  for (std::int64_t y = 0; y < 64; ++y)
    for (std::int64_t x = 0; x < 64; ++x) {
      const float v = f.at(0, 0, y, x);
      partial += v > bg + 1e-3f && v < 1.f - 1e-3f;
    }
  EXPECT_GT(partial, 10);
}

TEST(Synth, Validation) {
  SynthConfig s;
  s.max_size = 80;
  EXPECT_THROW(gen_moving_shapes(s, 1), ConfigError);
  s = {};
  s.max_speed = 17;  // > 64 / 4
  EXPECT_THROW(gen_moving_shapes(s, 1), ConfigError);
  s = {};
  s.background = "stripes";
  EXPECT_THROW(gen_moving_shapes(s, 1), ConfigError);
}

TEST(Synth, MotionBins) {
  EXPECT_EQ(motion_bin_for(0.0), "slow");
  EXPECT_EQ(motion_bin_for(2.0), "slow");
  EXPECT_EQ(motion_bin_for(3.0), "medium");
  EXPECT_EQ(motion_bin_for(4.0), "fast");
  const auto clip = gen_moving_shapes(one_rectangle(3, 4), 1)[0];
  EXPECT_DOUBLE_EQ(clip.meta.max_speed, 5.0);
  EXPECT_EQ(clip.meta.motion_bin, "fast");
}

TEST(SamplePatch, FullSizeIsIdentityAndSeeded) {
  SynthConfig s;
  const auto clip = gen_moving_shapes(s, 1)[0];
  Rng rng(1);
  const auto same = sample_patch(clip, 64, rng);
  for (std::size_t j = 0; j < clip.frames.size(); ++j) EXPECT_EQ(same.frames[j].vec(), clip.frames[j].vec());
  Rng a(5), b(5);
  EXPECT_EQ(sample_patch(clip, 24, a).frames[1].vec(), sample_patch(clip, 24, b).frames[1].vec());
  EXPECT_THROW(sample_patch(clip, 65, rng), DataError);
}

TEST(SamplePatch, PreservesShiftInsideWindow) {
  const auto clip = gen_moving_shapes(one_rectangle(2, 1), 1)[0];
  Rng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = sample_patch(clip, 40, rng);
    EXPECT_EQ(p.frames[0].dims(), (Shape{1, 3, 40, 40}));
    EXPECT_TRUE(oracle::shifted_equal(p.frames[0], p.frames[1], 2, 1, 0, 0.0));
  }
}

TEST(IntervalSubsample, Indexing) {
  SynthConfig s;
  s.frames = 7;
  const auto clip = gen_moving_shapes(s, 1)[0];
  const auto same = interval_subsample(clip, 1);
  EXPECT_EQ(same.frames.size(), 7u);
  const auto r = interval_subsample(clip, 3);
  ASSERT_EQ(r.frames.size(), 3u);
  EXPECT_EQ(r.frames[0].vec(), clip.frames[0].vec());
  EXPECT_EQ(r.frames[1].vec(), clip.frames[3].vec());
  EXPECT_EQ(r.frames[2].vec(), clip.frames[6].vec());
  EXPECT_EQ(r.meta.interval, 3);
  EXPECT_THROW(interval_subsample(clip, 4), DataError);
}

TEST(FrameIo, RoundTripWithinQuantisation) {
  const auto dir = scratch("io");
  SynthConfig s;
  s.frames = 3;
  const auto clip = gen_moving_shapes(s, 1)[0];
  save_frames(clip.frames, dir);
  EXPECT_TRUE(fs::exists(dir / "00000.png"));
  const auto back = load_sequence(dir);
  ASSERT_EQ(back.frames.size(), 3u);
  double err = 0;
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t i = 0; i < clip.frames[j].vec().size(); ++i)
      err = std::max(err, std::abs(double(back.frames[j].vec()[i]) - clip.frames[j].vec()[i]));
  EXPECT_LE(err, 1.0 / 255);
  fs::remove_all(dir);
}

TEST(FrameIo, EmptyDirectoryAndBadFiles) {
  const auto dir = scratch("empty");
  try {
    load_sequence(dir);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("no frames"), std::string::npos);
  }
  std::ofstream(dir / "00000.png") << "not a png";
  try {
    load_sequence(dir);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("00000.png"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(FrameIo, InconsistentDimsNameTheFile) {
  const auto dir = scratch("dims");
  save_png(Frame(Shape{1, 3, 8, 8}, 0.5f), dir / "00000.png");
  save_png(Frame(Shape{1, 3, 8, 6}, 0.5f), dir / "00001.png");
  try {
    load_sequence(dir);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("00001.png"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(FrameIo, ThreeFrameFolderIsOneTriplet) {
  const auto dir = scratch("triplet");
  std::vector<Frame> frames;
  for (int k = 0; k < 3; ++k) frames.emplace_back(Shape{1, 3, 4, 4}, k / 4.f);
  save_frames(frames, dir);
  const auto clip = load_sequence(dir);
  ASSERT_EQ(clip.frames.size(), 3u);
  EXPECT_EQ(clip.frames[2].vec()[0], std::round(0.5f * 255) / 255.f);
  fs::remove_all(dir);
}

TEST(Manifest, RoundTripWithTags) {
  const auto dir = scratch("manifest");
  SynthConfig s;
  s.frames = 3;
  const auto data = gen_moving_shapes(s, 2);
  save_frames(data[0].frames, dir / "a");
  save_frames(data[1].frames, dir / "b");
  write_manifest({{"a", "fast", 4.5}, {dir / "b", "", -1}}, dir / "m.json");
  const auto clips = load_manifest(dir / "m.json");
  ASSERT_EQ(clips.size(), 2u);
  EXPECT_EQ(clips[0].meta.subset, "fast");
  EXPECT_EQ(clips[0].meta.motion_bin, "fast");
  EXPECT_EQ(clips[1].meta.subset, "all");
  std::ofstream(dir / "bad.json") << "{\"dir\": 3}";
  EXPECT_THROW(read_manifest(dir / "bad.json"), DataError);
  std::ofstream(dir / "empty.json") << "[]";
  EXPECT_THROW(read_manifest(dir / "empty.json"), DataError);
  fs::remove_all(dir);
}

TEST(Stack, Batches) {
  Frame a(Shape{1, 3, 2, 2}, 0.1f), b(Shape{1, 3, 2, 2}, 0.2f);
  const auto s = stack_frames({a, b});
  EXPECT_EQ(s.dims(), (Shape{2, 3, 2, 2}));
  EXPECT_EQ(s.vec()[12], 0.2f);
  EXPECT_THROW(stack_frames({a, Frame(Shape{1, 3, 2, 3})}), ShapeError);
}
