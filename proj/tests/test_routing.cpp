#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace dmvfn;
using oracle::gradcheck;
using oracle::project;
using oracle::random_tensor;
using TD = Tensor<double>;

namespace {

double logit(double s) { return std::log(s / (1 - s)); }

// sigma = 1.0 exactly is out of reach for a finite logit; 40 gets within 1e-17.
TD logits_for(const std::vector<double>& sig) {
  std::vector<double> l;
  for (double s : sig) l.push_back(s >= 1.0 ? 40.0 : logit(s));
  return TD(Shape{1, static_cast<std::int64_t>(sig.size())}, l);
}

}  // namespace

TEST(Stebs, EqualLogitsGiveBeta) {
  const auto w = stebs_normalize(TD(Shape{1, 9}, 0.3), 0.5);
  for (double v : w.vec()) EXPECT_NEAR(v, 0.5, 1e-12);
}

TEST(Stebs, ClosedForms) {
  auto w = stebs_normalize(logits_for({0.9, 0.1}), 0.5);
  EXPECT_NEAR(w.vec()[0], 0.9, 1e-12);
  EXPECT_NEAR(w.vec()[1], 0.1, 1e-12);
  w = stebs_normalize(logits_for({1.0, 0.1, 0.1}), 0.8);
  EXPECT_NEAR(w.vec()[0], 1.0, 1e-12);
  EXPECT_NEAR(w.vec()[1], 0.2, 1e-12);
  EXPECT_NEAR(w.vec()[2], 0.2, 1e-12);
}

TEST(Stebs, RatesInUnitIntervalAndMonotoneInBeta) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    auto l = random_tensor({1, 9}, rng, -4, 4, false);
    double last = -1;
    for (double beta : {0.3, 0.4, 0.5, 0.6, 0.7, 0.8}) {
      const auto w = stebs_normalize(l, beta);
      double s = 0;
      for (double v : w.vec()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        s += v;
      }
      EXPECT_GE(s, last - 1e-12);
      last = s;
    }
  }
}

TEST(Stebs, NormalizeGradCheck) {
  Rng rng(2);
  // small beta keeps every rate below the clamp; large beta clamps some
  for (double beta : {0.3, 0.9}) {
    auto l = random_tensor({3, 5}, rng, -2, 2);
    auto r = gradcheck([&] { return project(stebs_normalize(l, beta)); }, {l});
    EXPECT_LE(r.max_rel_error, 1e-3) << beta;
  }
}

TEST(Stebs, MonteCarloSelectionRate) {
  Rng rng(3);
  const TD l(Shape{1, 9}, 0.0);
  std::vector<int> hits(9, 0);
  const int draws = 10000;
  for (int d = 0; d < draws; ++d) {
    const auto s = stebs_sample(l, 0.5, rng);
    for (int i = 0; i < 9; ++i) hits[i] += s.v.vec()[i] == 1.0;
  }
  for (int h : hits) {
    EXPECT_GE(h / double(draws), 0.48);
    EXPECT_LE(h / double(draws), 0.52);
  }
}

TEST(Stebs, BackwardIsIdentityOntoRates) {
  Rng rng(4);
  auto l = random_tensor({1, 4}, rng, -1, 1);
  const auto s = stebs_sample(l, 0.5, rng);
  for (double v : s.v.vec()) EXPECT_TRUE(v == 0.0 || v == 1.0);
  // d(sum c*v)/dw must be c exactly; compare against the gradient of sum c*w.
  TD c(Shape{1, 4}, {0.3, -1.1, 2.0, 0.7});
  backward(sum(mul(s.v, c)));
  const auto via_ste = l.grad_tensor().vec();
  l.zero_grad();
  backward(sum(mul(stebs_normalize(l, 0.5), c)));
  EXPECT_EQ(via_ste, l.grad_tensor().vec());
}

TEST(Stebs, ThresholdInference) {
  Rng rng(5);
  const auto s = stebs_sample(logits_for({0.9, 0.1, 0.6}), 0.5, rng, true);
  // w = 1.6 * sigma / 1.6 = sigma
  EXPECT_EQ(s.v.vec(), (std::vector<double>{1, 0, 1}));
}

TEST(Gumbel, ScalarEvaluations) {
  auto at = [](double lg, double tau) { return gumbel_route(TD(Shape{1, 1}, lg), TD(Shape{1, 1}, 0.0), tau).item(); };
  for (double tau : {0.1, 1.0, 5.0}) EXPECT_NEAR(at(1.0, tau), 0.5, 1e-15);
  EXPECT_NEAR(at(1.5, 1.0), 1 / (1 + std::exp(-1.0)), 1e-12);
  EXPECT_GT(at(2.0, 1e-3), 1 - 1e-12);
  EXPECT_LT(at(0.0, 1e-3), 1e-12);
  EXPECT_THROW(at(1.0, 0.0), ConfigError);
  EXPECT_THROW(at(1.0, -1.0), ConfigError);
}

TEST(Gumbel, RelaxationGradCheck) {
  Rng rng(6);
  auto l = random_tensor({2, 4}, rng, -1, 2);
  auto g = random_tensor({2, 4}, rng, -1, 1, false);
  auto r = gradcheck([&] { return project(gumbel_route(l, g, 0.7)); }, {l});
  EXPECT_LE(r.max_rel_error, 1e-3);
}

TEST(Gumbel, TemperatureDecay) {
  RoutingMode m;
  m.tau_start = 5;
  m.tau_end = 0.1;
  EXPECT_DOUBLE_EQ(m.tau_at(0, 100), 5.0);
  EXPECT_NEAR(m.tau_at(100, 100), 0.1, 1e-12);
  EXPECT_LT(m.tau_at(60, 100), m.tau_at(50, 100));
}

class RoutingNetTest : public ::testing::Test {
 protected:
  ParamSet<double> ps;
  Rng rng{7};
  RoutingNet<double> net = RoutingNet<double>::make(ps, "routing", 9, 4, 2, rng);
};

TEST_F(RoutingNetTest, ZeroHeadGivesZeroLogits) {
  auto prev = random_tensor({2, 3, 16, 16}, rng, 0, 1, false);
  auto cur = random_tensor({2, 3, 16, 16}, rng, 0, 1, false);
  const auto l = routing_logits(net, prev, cur);
  EXPECT_EQ(l.dims(), (Shape{2, 9}));
  for (double v : l.vec()) EXPECT_EQ(v, 0.0);
}

TEST_F(RoutingNetTest, PerSampleRowsAndGradCheck) {
  for (auto& p : ps.params())
    for (auto& v : p.tensor.mutable_values()) v = rng.uniform(-0.5, 0.5);
  auto prev = random_tensor({2, 3, 16, 16}, rng, 0, 1);
  auto cur = random_tensor({2, 3, 16, 16}, rng, 0, 1);
  const auto l = routing_logits(net, prev, cur);
  bool differ = false;
  for (int i = 0; i < 9; ++i) differ |= l.vec()[i] != l.vec()[9 + i];
  EXPECT_TRUE(differ);
  std::vector<TD> inputs{prev};
  for (auto& p : ps.params()) inputs.push_back(p.tensor);
  auto r = gradcheck([&] { return project(routing_logits(net, prev, cur)); }, inputs, 1e-6, 1e-3, 40);
  EXPECT_LE(r.max_rel_error, 1e-3);
}

TEST_F(RoutingNetTest, Modes) {
  auto prev = random_tensor({3, 3, 16, 16}, rng, 0, 1, false);
  auto cur = random_tensor({3, 3, 16, 16}, rng, 0, 1, false);
  RoutingMode mode;
  mode.kind = RoutingKind::always_on;
  auto r = make_routing(mode, net, prev, cur, Phase::infer, rng);
  for (double v : r.v.vec()) EXPECT_EQ(v, 1.0);

  mode.kind = RoutingKind::random;
  Rng a(11), b(11);
  EXPECT_EQ(make_routing(mode, net, prev, cur, Phase::infer, a).v.vec(),
            make_routing(mode, net, prev, cur, Phase::infer, b).v.vec());

  mode.kind = RoutingKind::gumbel;
  r = make_routing(mode, net, prev, cur, Phase::train, rng, 1.0);
  EXPECT_TRUE(r.soft);
  for (double v : r.v.vec()) EXPECT_TRUE(v > 0.0 && v < 1.0);
  r = make_routing(mode, net, prev, cur, Phase::infer, rng);
  for (double v : r.v.vec()) EXPECT_TRUE(v == 0.0 || v == 1.0);

  mode.kind = RoutingKind::stebs;
  r = make_routing(mode, net, prev, cur, Phase::infer, rng);
  for (double v : r.v.vec()) EXPECT_TRUE(v == 0.0 || v == 1.0);
  for (double v : r.probs.vec()) EXPECT_NEAR(v, 0.5, 1e-12);

  mode.beta = 0;
  EXPECT_THROW(make_routing(mode, net, prev, cur, Phase::infer, rng), ConfigError);
  EXPECT_THROW(routing_kind_from_string("sometimes"), ConfigError);
}
