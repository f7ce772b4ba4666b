#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace dmvfn;
using oracle::random_tensor;
using TD = Tensor<double>;

TEST(MsSsim, SingleScaleMatchesDirectOracle) {
  Rng rng(1);
  ASSERT_EQ(ms_ssim_scales(16, 16), 1);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_tensor({1, 1, 16, 16}, rng, 0, 1, false);
    // correlated pair so the score is not near zero
    std::vector<double> bv(a.vec());
    for (auto& e : bv) e = std::clamp(e + rng.uniform(-0.2, 0.2), 0.0, 1.0);
    TD b(a.dims(), bv);
    EXPECT_NEAR(ms_ssim(a, b), oracle::ssim_direct(a.vec(), bv, 16, 16), 1e-6);
  }
}

TEST(MsSsim, IdentityAndSymmetry) {
  Rng rng(2);
  for (auto [h, w] : {std::pair{16, 16}, std::pair{64, 64}, std::pair{200, 180}}) {
    auto a = random_tensor({1, 3, h, w}, rng, 0, 1, false);
    auto b = random_tensor({1, 3, h, w}, rng, 0, 1, false);
    EXPECT_DOUBLE_EQ(ms_ssim(a, a), 1.0);
    EXPECT_NEAR(ms_ssim(a, b), ms_ssim(b, a), 1e-12);
    EXPECT_LT(ms_ssim(a, b), 1.0);
  }
}

TEST(MsSsim, ScaleCount) {
  EXPECT_EQ(ms_ssim_scales(10, 64), 0);
  EXPECT_EQ(ms_ssim_scales(11, 11), 1);
  EXPECT_EQ(ms_ssim_scales(64, 64), 3);
  EXPECT_EQ(ms_ssim_scales(176, 176), 5);
  EXPECT_THROW(ms_ssim(TD(Shape{1, 3, 8, 8}), TD(Shape{1, 3, 8, 8})), ShapeError);
  EXPECT_THROW(ms_ssim(TD(Shape{1, 3, 16, 16}), TD(Shape{1, 3, 16, 17})), ShapeError);
}

TEST(Psnr, Examples) {
  TD a(Shape{1, 3, 8, 8}, 0.5);
  EXPECT_EQ(psnr(a, a), 99.0);
  TD b(Shape{1, 3, 8, 8}, 0.5 + 1.0 / 255);
  EXPECT_NEAR(psnr(a, b), 20 * std::log10(255.0), 1e-6);
  EXPECT_NEAR(psnr(a, b), 48.1308, 1e-4);
  TD c(Shape{1, 3, 8, 8}, 0.6);  // MSE 0.01
  EXPECT_NEAR(psnr(a, c), 20.0, 1e-6);
}

TEST(Flops, SingleConv) {
  EXPECT_EQ(conv2d_flops(1, 1, 3, 8, 8), 1152.0);
  EXPECT_EQ(linear_flops(4, 5), 40.0);
}

TEST(Flops, LedgerInvariants) {
  ModelConfig cfg;
  const auto led = count_flops(cfg, 64, 64);
  ASSERT_EQ(led.blocks.size(), 9u);
  EXPECT_EQ(led.dynamic_total(std::vector<std::uint8_t>(9, 1)), led.static_total());
  EXPECT_EQ(led.dynamic_total(std::vector<std::uint8_t>(9, 0)), led.routing_total());
  EXPECT_GT(led.routing_total(), 0.0);
  // monotone under set inclusion
  std::vector<std::uint8_t> sel(9, 0);
  double last = led.dynamic_total(sel);
  for (int i : {4, 0, 8, 2, 6, 1, 3, 5, 7}) {
    sel[i] = 1;
    const double t = led.dynamic_total(sel);
    EXPECT_GT(t, last);
    last = t;
  }
  EXPECT_THROW(led.dynamic_total({1, 1}), ShapeError);
  EXPECT_THROW(count_flops(cfg, 63, 64), ShapeError);
}

TEST(Flops, BlockConvCountsMatchLayerShapes) {
  // motion conv0 of a scale-1 block on 16x16: 14 -> width/2 channels, 8x8 output
  const auto b = mvfb_flops(1, 8, 4, true, 16, 16);
  double conv0 = -1;
  for (const auto& l : b.layers)
    if (l.name == "motion.conv0") conv0 = l.flops;
  EXPECT_EQ(conv0, conv2d_flops(14, 4, 3, 8, 8));
  const auto no_spatial = mvfb_flops(1, 8, 4, false, 16, 16);
  EXPECT_LT(no_spatial.total(), b.total());
}

namespace {

std::vector<ClipRecord> clips(int n, int frames, std::uint64_t seed, double max_speed = 6) {
  SynthConfig s;
  s.height = s.width = 32;
  s.min_size = 4;
  s.max_size = 10;
  s.frames = frames;
  s.seed = seed;
  s.max_speed = max_speed;
  return gen_moving_shapes(s, static_cast<std::size_t>(n));
}

ModelConfig tiny() {
  ModelConfig c;
  c.width_s4 = c.width_s2 = c.width_s1 = 8;
  c.spatial_width = 4;
  c.routing_width = 4;
  return c;
}

}  // namespace

TEST(CopyLast, StaticVideoScoresOne) {
  auto data = clips(3, 7, 1, 0.0);
  const auto rep = copy_last_baseline(data, {1, 3, 5});
  for (int h : {1, 3, 5}) {
    EXPECT_DOUBLE_EQ(rep.mean("all", h, "ms_ssim"), 100.0);
    EXPECT_EQ(rep.mean("all", h, "psnr"), 99.0);
    EXPECT_EQ(rep.count("all", h, "ms_ssim"), 3);
  }
}

TEST(CopyLast, MovingShapesBelowOne) {
  SynthConfig s;
  s.height = s.width = 32;
  s.min_size = 4;
  s.max_size = 10;
  s.min_speed = 1.0;
  s.max_speed = 3.0;
  s.frames = 4;
  const auto rep = copy_last_baseline(gen_moving_shapes(s, 4), {1, 2});
  EXPECT_LT(rep.mean("all", 1, "ms_ssim"), 100.0);
  EXPECT_THROW(copy_last_baseline(gen_moving_shapes(s, 1), {3}), DataError);
}

TEST(Eval, PerfectPredictionsAndCsv) {
  auto data = clips(2, 5, 2, 0.0);
  DmvfnModel<float> model(tiny());  // zero merge layers, static clips -> exact copy
  RoutingMode mode;
  mode.kind = RoutingKind::always_on;
  Rng rng(0);
  for (auto& c : data) c.meta.subset = "static";
  const auto rep = evaluate_model(model, data, {1, 3}, mode, rng);
  EXPECT_NEAR(rep.mean("all", 1, "ms_ssim"), 100.0, 1e-4);
  EXPECT_NEAR(rep.mean("static", 3, "ms_ssim"), 100.0, 1e-4);
  std::ostringstream os;
  rep.write_csv(os);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "subset,horizon,metric,value,n");
  EXPECT_NE(os.str().find("static,3,ms_ssim,100.000000,2"), std::string::npos) << os.str();
}

TEST(Usage, AlwaysOnAndRandom) {
  DmvfnModel<float> model(tiny());
  auto data = clips(4, 2, 3);
  RoutingMode mode;
  mode.kind = RoutingKind::always_on;
  Rng rng(4);
  auto st = usage_rate(model, data, mode, rng);
  for (double r : st.rates("all")) EXPECT_EQ(r, 1.0);

  mode.kind = RoutingKind::random;
  mode.p = 0.5;
  st = usage_rate(model, data, mode, rng, UsageKey::subset, 2500);
  for (double r : st.rates("all")) {
    EXPECT_GE(r, 0.48);
    EXPECT_LE(r, 0.52);
  }
  EXPECT_THROW(usage_rate(model, {}, mode, rng), DataError);
}

TEST(Usage, SubsetKeysPreserved) {
  DmvfnModel<float> model(tiny());
  auto data = clips(4, 6, 5);
  data[0].meta.subset = "left";
  data[1].meta.subset = "right";
  data[2].meta.subset = "left";
  data[3].meta.subset = "right";
  RoutingMode mode;
  Rng rng(6);
  auto st = usage_rate(model, data, mode, rng);
  EXPECT_EQ(st.cells.size(), 3u);
  EXPECT_EQ(st.cells.at("left").second, 2);
  st = usage_rate(model, data, mode, rng, UsageKey::interval);
  EXPECT_TRUE(st.cells.count("interval_1") && st.cells.count("interval_3") && st.cells.count("interval_5"));
  st = usage_rate(model, data, mode, rng, UsageKey::motion);
  for (const auto& [k, cell] : st.cells) EXPECT_TRUE(k == "all" || k == "slow" || k == "medium" || k == "fast") << k;
}

TEST(FlopsReport, ExpectedCostMonotoneInBeta) {
  DmvfnModel<float> model(tiny());
  Rng init(7);
  for (auto& p : model.params().params())
    if (p.name.rfind("routing.head", 0) == 0)
      for (auto& v : p.tensor.mutable_values()) v = static_cast<float>(init.uniform(-2, 2));
  auto data = clips(6, 2, 8);
  double last = 0;
  for (double beta : {0.3, 0.4, 0.5, 0.6, 0.7, 0.8}) {
    RoutingMode mode;
    mode.beta = beta;
    Rng rng(9);
    const auto rep = flops_report(model, data, mode, rng);
    EXPECT_GE(rep.expected_total, last);
    EXPECT_LE(rep.expected_total, rep.ledger.static_total());
    last = rep.expected_total;
  }
}
