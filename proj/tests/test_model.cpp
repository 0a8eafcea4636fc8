#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "fixtures.hpp"
#include "visiontom/model.hpp"

using namespace vtom;
using vtom::testing::random_frames;
using vtom::testing::small_config;

TEST(ModelGradient, MatchesCentralDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto cfg = small_config(seed);
    Model<double> m(init_weights(cfg));
    std::mt19937_64 rng(seed);
    auto frames = random_frames(cfg, rng);
    std::vector<int> text = {1, 2, 3};
    std::vector<int> opts = {4, 5, 6, 7};
    auto g = m.grad_wrt_visual(frames, text, opts, 1);
    const double h = 1e-3;
    double worst = 0;
    for (std::size_t i = 0; i < frames.size(); ++i) {
      auto fp = frames, fm = frames;
      fp[i] += h;
      fm[i] -= h;
      auto lp = cross_entropy(m.logits(fp, text, opts), 1).first;
      auto lm = cross_entropy(m.logits(fm, text, opts), 1).first;
      const double fd = (lp - lm) / (2 * h);
      const double err = std::abs(fd - g.grad[i]) / std::max({std::abs(fd), std::abs(g.grad[i]), 1e-8});
      worst = std::max(worst, err);
    }
    EXPECT_LE(worst, 1e-6) << "seed " << seed;
  }
}

namespace {

std::vector<int> kText = {1, 2, 3};
std::vector<int> kOpts = {4, 5, 6, 7};

HookSpec hook_on(HeadId id, std::vector<double> vec, double alpha) {
  HookSpec s;
  s.targets.push_back({id, std::move(vec)});
  s.alpha = alpha;
  return s;
}

}  // namespace

TEST(ModelHooks, ZeroAlphaAndZeroVectorAreBitIdentical) {
  auto cfg = small_config(3);
  Model<double> m(init_weights(cfg));
  std::mt19937_64 rng(3);
  auto f = random_frames(cfg, rng);
  auto plain = m.logits(f, kText, kOpts);
  auto a0 = hook_on({1, 1}, std::vector<double>(cfg.head_dim, 0.7), 0.0);
  auto d0 = hook_on({0, 0}, std::vector<double>(cfg.head_dim, 0.0), 3.0);
  auto la = m.logits(f, kText, kOpts, &a0);
  auto ld = m.logits(f, kText, kOpts, &d0);
  EXPECT_EQ(0, std::memcmp(plain.data(), la.data(), sizeof(double) * plain.size()));
  EXPECT_EQ(0, std::memcmp(plain.data(), ld.data(), sizeof(double) * plain.size()));
}

TEST(ModelHooks, SingleLayerShiftMatchesHandComputation) {
  auto cfg = small_config(4, 1, 1, 4);
  auto w = init_weights(cfg);
  // A readable output projection: scaled identity plus one off-diagonal entry.
  w.wo(0).setIdentity();
  w.wo(0) *= 0.5;
  w.wo(0)(0, 3) = 0.25;
  Model<double> m(w);
  std::mt19937_64 rng(4);
  auto f = random_frames(cfg, rng);
  Tape<double> tape;
  m.forward(m.embed(f, kText), kOpts, nullptr, &tape);
  const std::vector<double> delta = {1.0, -2.0, 0.5, 3.0};
  const double alpha = 0.8;

  // Final residual row with the hook, computed by hand.
  const int last = static_cast<int>(tape.x[0].rows()) - 1;
  Eigen::RowVectorXd x = tape.x[0].row(last) + tape.o[0].row(last) * w.wo(0);
  for (int j = 0; j < 4; ++j)
    for (int d = 0; d < 4; ++d) x(j) += alpha * delta[d] * w.wo(0)(d, j);
  const double mu = x.mean();
  Eigen::RowVectorXd c = x.array() - mu;
  const Eigen::RowVectorXd z = c / std::sqrt(c.squaredNorm() / 4 + kLayerNormEps);
  auto hs = hook_on({0, 0}, delta, alpha);
  auto got = m.logits(f, kText, kOpts, &hs);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(got(i), w.unembed().row(kOpts[i]).dot(z), 1e-12);
}

TEST(ModelHooks, LocalityAcrossLayersAndHeads) {
  auto cfg = small_config(5, 3, 3, 4);
  Model<double> m(init_weights(cfg));
  std::mt19937_64 rng(5);
  auto f = random_frames(cfg, rng);
  auto s = m.embed(f, kText);
  auto plain = m.forward(s, kOpts);
  const std::vector<double> delta = {0.3, -0.1, 0.2, 0.4};
  auto hs = hook_on({1, 2}, delta, 1.5);
  auto hooked = m.forward(s, kOpts, &hs);
  const int H = cfg.heads;
  for (int h = 0; h < H; ++h) EXPECT_EQ(plain.trace.row(h), hooked.trace.row(h)) << "layer 0 head " << h;
  for (int h = 0; h < 2; ++h) EXPECT_EQ(plain.trace.row(H + h), hooked.trace.row(H + h)) << "layer 1 head " << h;
  for (int d = 0; d < 4; ++d) EXPECT_NEAR(hooked.trace(H + 2, d) - plain.trace(H + 2, d), 1.5 * delta[d], 1e-12);
  EXPECT_NE(plain.trace.row(2 * H), hooked.trace.row(2 * H));
}

TEST(ModelForward, ResidualFormPerLayer) {
  auto cfg = small_config(6, 3, 2, 4);
  Model<double> m(init_weights(cfg));
  std::mt19937_64 rng(6);
  auto f = random_frames(cfg, rng);
  Tape<double> tape;
  m.forward(m.embed(f, kText), kOpts, nullptr, &tape);
  for (int l = 0; l + 1 < cfg.layers; ++l) {
    Mat<double> sum = Mat<double>::Zero(tape.x[l].rows(), cfg.hidden());
    for (int h = 0; h < cfg.heads; ++h) {
      const int D = cfg.head_dim;
      sum += tape.o[l].middleCols(h * D, D) * m.weights().wo(l).middleRows(h * D, D);
    }
    EXPECT_LE((tape.x[l + 1] - tape.x[l] - sum).cwiseAbs().maxCoeff(), 1e-10) << "layer " << l;
  }
}

TEST(ModelForward, Deterministic) {
  auto cfg = small_config(7);
  Model<double> a(init_weights(cfg)), b(init_weights(cfg));
  std::mt19937_64 rng(7);
  auto f = random_frames(cfg, rng);
  auto hs = hook_on({1, 0}, {0.1, 0.2, 0.3, 0.4}, 2.0);
  auto x = a.forward(a.embed(f, kText), kOpts, &hs);
  auto y = b.forward(b.embed(f, kText), kOpts, &hs);
  EXPECT_EQ(x.logits, y.logits);
  EXPECT_EQ(x.trace, y.trace);
}

TEST(ModelForward, RejectsBadShapes) {
  auto cfg = small_config(8);
  Model<double> m(init_weights(cfg));
  std::vector<double> f(cfg.frame_values() - 1, 0.0);
  EXPECT_THROW(m.embed(f, kText), SizeError);
  std::vector<double> ok(cfg.frame_values(), 0.0);
  EXPECT_THROW(m.embed(ok, std::vector<int>{1, 2, 3, 4}), SizeError);
  EXPECT_THROW(m.embed(ok, std::vector<int>{99}), SizeError);
  auto bad = hook_on({2, 0}, {0, 0, 0, 0}, 1.0);
  EXPECT_THROW(m.logits(ok, kText, kOpts, &bad), SizeError);
  auto short_vec = hook_on({0, 0}, {0, 0}, 1.0);
  EXPECT_THROW(m.logits(ok, kText, kOpts, &short_vec), SizeError);
}

TEST(ModelForward, NonFiniteInputRaisesNumericError) {
  auto cfg = small_config(9);
  Model<double> m(init_weights(cfg));
  std::vector<double> f(cfg.frame_values(), 0.0);
  f[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(m.logits(f, kText, kOpts), NumericError);
}

TEST(ModelEmbed, MatchesHandRolledArithmetic) {
  auto cfg = small_config(10);
  Model<double> m(init_weights(cfg));
  std::mt19937_64 rng(10);
  auto f = random_frames(cfg, rng);
  auto s = m.embed(f, kText);
  const auto& w = m.weights();
  const int cells = cfg.cells(), hid = cfg.hidden(), vt = cfg.visual_tokens();
  ASSERT_EQ(s.rows(), vt + 3);
  for (int t = 0; t < vt; ++t)
    for (int j = 0; j < hid; ++j) {
      double acc = w.pos()(t, j);
      for (int c = 0; c < cells; ++c) acc += (f[t * cells + c] - cfg.pixel_center) / cfg.pixel_scale * w.code()(c, j);
      EXPECT_NEAR(s(t, j), acc, 1e-12);
    }
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < hid; ++j) EXPECT_EQ(s(vt + i, j), w.tok()(kText[i], j) + w.pos()(vt + i, j));
}

TEST(ModelEmbed, BackgroundFramesGiveBiasOnlyRows) {
  auto cfg = small_config(11);
  Model<double> m(init_weights(cfg));
  std::vector<double> f(cfg.frame_values(), cfg.pixel_center);
  auto s = m.embed(f, std::vector<int>{0});
  for (int t = 0; t < cfg.visual_tokens(); ++t) EXPECT_EQ(s.row(t), m.weights().pos().row(t));
}

TEST(ModelGradient, SymmetricUnembeddingGivesZeroGradient) {
  auto cfg = small_config(12);
  auto w = init_weights(cfg);
  for (int o : kOpts) w.unembed().row(o) = w.unembed().row(kOpts[0]).eval();
  Model<double> m(w);
  std::mt19937_64 rng(12);
  auto g = m.grad_wrt_visual(random_frames(cfg, rng), kText, kOpts, 2);
  EXPECT_NEAR(g.loss, std::log(4.0), 1e-12);
  for (double v : g.grad) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(ModelGradient, DisconnectedCellHasZeroGradient) {
  auto cfg = small_config(13);
  auto w = init_weights(cfg);
  w.code().row(4).setZero();
  Model<double> m(w);
  std::mt19937_64 rng(13);
  auto g = m.grad_wrt_visual(random_frames(cfg, rng), kText, kOpts, 0);
  for (int t = 0; t < cfg.visual_tokens(); ++t) EXPECT_EQ(g.grad[t * cfg.cells() + 4], 0.0);
  EXPECT_EQ(m.grad_calls(), 1u);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto cfg = small_config(14);
  auto w = init_weights(cfg);
  const auto path = (std::filesystem::temp_directory_path() / "vtom_ckpt_test.bin").string();
  save_checkpoint(path, w);
  auto back = load_checkpoint(path);
  EXPECT_TRUE(back == w);
  EXPECT_EQ(config_hash(back.cfg), config_hash(cfg));
  {
    std::ofstream os(path, std::ios::binary | std::ios::app);
    os.put('x');
  }
  EXPECT_THROW(load_checkpoint(path), FormatError);
  std::filesystem::resize_file(path, 20);
  EXPECT_THROW(load_checkpoint(path), FormatError);
  std::filesystem::remove(path);
}
