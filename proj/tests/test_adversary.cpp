#include <gtest/gtest.h>

#include <cmath>

#include "visiontom/adversary.hpp"

using namespace vtom;

namespace {

ModelConfig tiny_task_model(std::uint64_t seed) {
  ModelConfig base;
  base.layers = 2;
  base.heads = 2;
  base.head_dim = 8;
  base.seed = seed;
  return model_config_for(TaskConfig{}, base);
}

AttackConfig pgd_cfg(double eps, int iters) {
  AttackConfig a;
  a.epsilon = eps;
  a.iters = iters;
  return a;
}

AttackConfig gauss_cfg(double lo, double hi, std::uint64_t seed = 42) {
  AttackConfig a;
  a.mode = AttackConfig::Mode::Gaussian;
  a.sigma_low = lo;
  a.sigma_high = hi;
  a.seed = seed;
  return a;
}

const Dataset& few() {
  static const Dataset d = generate(TaskConfig{}, 4, 17);
  return d;
}

}  // namespace

TEST(AttackConfig, Defaults) {
  AttackConfig a;
  EXPECT_EQ(a.epsilon, 16.0);
  EXPECT_EQ(a.step, 1.0);
  EXPECT_EQ(a.iters, 300);
  EXPECT_EQ(a.sigma_low, 50.0);
  EXPECT_EQ(a.sigma_high, 80.0);
}

TEST(AttackConfig, Validation) {
  auto a = pgd_cfg(-1, 3);
  EXPECT_THROW(a.validate(), ConfigError);
  a = pgd_cfg(1, -1);
  EXPECT_THROW(a.validate(), ConfigError);
  a = pgd_cfg(1, 1);
  a.step = 0;
  EXPECT_THROW(a.validate(), ConfigError);
  EXPECT_THROW(gauss_cfg(5, 4).validate(), ConfigError);
  Model<double> m(init_weights(tiny_task_model(1)));
  EXPECT_THROW(pgd(m, few()[0], gauss_cfg(1, 2)), ConfigError);
  EXPECT_THROW(gaussian(few()[0], pgd_cfg(1, 1)), ConfigError);
}

TEST(Pgd, ZeroEpsilonLeavesFramesAndLoss) {
  Model<double> m(init_weights(tiny_task_model(2)));
  const auto& x = few()[0];
  auto r = pgd(m, x, pgd_cfg(0, 5));
  EXPECT_EQ(r.frames, x.frames);
  ASSERT_EQ(r.loss_trace.size(), 6u);
  for (double l : r.loss_trace) EXPECT_EQ(l, r.loss_trace.front());
  EXPECT_TRUE(r.failed);
}

TEST(Pgd, OneStepIsSignOfGradient) {
  Model<double> m(init_weights(tiny_task_model(3)));
  const auto& x = few()[1];
  auto text = x.text();
  auto g = m.grad_wrt_visual(x.frames, text, x.options, x.gold);
  auto cfg = pgd_cfg(16, 1);
  cfg.step = 2.0;
  auto r = pgd(m, x, cfg);
  for (std::size_t i = 0; i < x.frames.size(); ++i) {
    const double s = (g.grad[i] > 0) - (g.grad[i] < 0);
    EXPECT_EQ(r.frames[i], std::clamp(x.frames[i] + 2.0 * s, 0.0, 255.0)) << i;
  }
  EXPECT_EQ(r.loss_trace.front(), g.loss);
}

TEST(Pgd, ProjectionHoldsAndLossRises) {
  Model<double> m(init_weights(tiny_task_model(4)));
  int steps = 0, up = 0;
  for (const auto& x : few()) {
    auto r = pgd(m, x, pgd_cfg(8, 30));
    double linf = 0;
    for (std::size_t i = 0; i < x.frames.size(); ++i) {
      linf = std::max(linf, std::abs(r.frames[i] - x.frames[i]));
      ASSERT_GE(r.frames[i], 0.0);
      ASSERT_LE(r.frames[i], 255.0);
    }
    EXPECT_LE(linf, 8.0);
    for (std::size_t t = 1; t < r.loss_trace.size(); ++t) {
      ++steps;
      up += r.loss_trace[t] >= r.loss_trace[t - 1];
    }
    EXPECT_GT(r.loss_trace.back(), r.loss_trace.front());
  }
  EXPECT_GE(static_cast<double>(up) / steps, 0.8);
}

TEST(Pgd, ClippingAtPixelRangeIsExact) {
  Model<double> m(init_weights(tiny_task_model(5)));
  auto x = few()[2];
  // Saturated frames leave PGD no room in one direction.
  for (std::size_t i = 0; i < x.frames.size(); ++i) x.frames[i] = (i % 2) ? 255.0 : 0.0;
  auto r = pgd(m, x, pgd_cfg(16, 10));
  for (std::size_t i = 0; i < x.frames.size(); ++i) {
    ASSERT_GE(r.frames[i], 0.0);
    ASSERT_LE(r.frames[i], 255.0);
    ASSERT_LE(std::abs(r.frames[i] - x.frames[i]), 16.0);
  }
}

TEST(Pgd, LargerBudgetNeverLowersFinalLoss) {
  Model<double> m(init_weights(tiny_task_model(6)));
  for (const auto& x : few()) {
    double prev = -1;
    for (double eps : {2.0, 8.0, 16.0}) {
      auto r = pgd(m, x, pgd_cfg(eps, 20));
      EXPECT_GE(r.loss_trace.back(), prev) << x.id << " eps " << eps;
      prev = r.loss_trace.back();
    }
  }
}

TEST(Gaussian, ZeroSigmaLeavesFrames) {
  const auto& x = few()[0];
  auto r = gaussian(x, gauss_cfg(0, 0));
  EXPECT_EQ(r.frames, x.frames);
  EXPECT_EQ(r.sigma, 0.0);
}

TEST(Gaussian, DeterministicPerSeed) {
  const auto& x = few()[3];
  auto a = gaussian(x, gauss_cfg(50, 80, 9));
  auto b = gaussian(x, gauss_cfg(50, 80, 9));
  auto c = gaussian(x, gauss_cfg(50, 80, 10));
  EXPECT_EQ(a.frames, b.frames);
  EXPECT_EQ(a.sigma, b.sigma);
  EXPECT_NE(a.frames, c.frames);
  EXPECT_GE(a.sigma, 50.0);
  EXPECT_LE(a.sigma, 80.0);
  for (double v : a.frames) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 255.0);
  }
}

TEST(Gaussian, EmpiricalStdMatchesDrawnSigma) {
  // Mid-range pixels and a small sigma keep clipping out of the picture.
  TaskInstance x;
  x.id = "flat";
  x.frames.assign(10000, 128.0);
  auto r = gaussian(x, gauss_cfg(10, 14));
  double s = 0, s2 = 0;
  for (std::size_t i = 0; i < x.frames.size(); ++i) {
    const double d = r.frames[i] - x.frames[i];
    s += d;
    s2 += d * d;
  }
  const double n = static_cast<double>(x.frames.size());
  const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
  EXPECT_NEAR(sd, r.sigma, 0.05 * r.sigma);
}

TEST(Gaussian, NeverReadsGradients) {
  Model<double> m(init_weights(tiny_task_model(7)));
  for (const auto& x : few()) attack(m, x, gauss_cfg(50, 80));
  EXPECT_EQ(m.grad_calls(), 0u);
  attack(m, few()[0], pgd_cfg(4, 3));
  EXPECT_EQ(m.grad_calls(), 4u);
}

TEST(AttackImpact, ZeroEpsilonMatchesClean) {
  Model<double> m(init_weights(tiny_task_model(8)));
  auto r = attack_impact(m, few(), pgd_cfg(0, 3));
  EXPECT_EQ(r.clean.acc, r.perturbed.acc);
  EXPECT_EQ(r.max_linf, 0.0);
  EXPECT_TRUE(r.in_range);
  auto g = attack_impact(m, few(), gauss_cfg(0, 0));
  EXPECT_EQ(g.clean.acc, g.perturbed.acc);
}
