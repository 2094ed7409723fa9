#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "auxnas/losses.hpp"
#include "auxnas/metrics.hpp"
#include "auxnas/optim.hpp"
#include "support/gradcheck.hpp"
#include "support/metric_oracle.hpp"

using namespace auxnas;
using auxnas::testing::check_op;
using auxnas::testing::random_tensor;
namespace oracle = auxnas::testing::oracle;

namespace {

constexpr double kPerOpTol = 1e-6;

Tensor<double> unit_normals(const Shape& s, Rng& rng) {
  auto t = random_tensor(s, rng);
  const std::size_t HW = static_cast<std::size_t>(s[2]) * s[3];
  for (int n = 0; n < s[0]; ++n)
    for (std::size_t i = 0; i < HW; ++i) {
      double ss = 0;
      for (int c = 0; c < 3; ++c) ss += std::pow(t[(static_cast<std::size_t>(n) * 3 + c) * HW + i], 2);
      for (int c = 0; c < 3; ++c) t[(static_cast<std::size_t>(n) * 3 + c) * HW + i] /= std::sqrt(ss);
    }
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Losses

TEST(LossSegmentation, UniformLogitsGiveLogK) {
  Tape<double> tape;
  auto l = loss_segmentation(tape.constant(Tensor<double>({2, 5, 3, 3}, 0.7)), std::vector<int>(18, 3));
  EXPECT_NEAR(l.value()[0], std::log(5.0), 1e-12);
}

TEST(LossSegmentation, AllIgnoredIsZeroWithZeroGrad) {
  Tape<double> tape;
  Rng rng(1);
  auto x = tape.leaf(random_tensor({1, 5, 2, 2}, rng));
  auto l = loss_segmentation(x, std::vector<int>(4, kIgnoreLabel));
  EXPECT_EQ(l.value()[0], 0.0);
  tape.backward(l);
  for (double g : tape.grad(x.id)) EXPECT_EQ(g, 0.0);
}

TEST(LossSegmentation, LabelOutOfRangeIsDataError) {
  Tape<double> tape;
  EXPECT_THROW(loss_segmentation(tape.constant(Tensor<double>({1, 5, 1, 2})), std::vector<int>{0, 5}), DataError);
}

TEST(LossSegmentation, GradCheck) {
  Rng rng(2);
  std::vector<int> labels;
  for (int i = 0; i < 2 * 3 * 3; ++i) labels.push_back(i % 7 == 0 ? kIgnoreLabel : static_cast<int>(rng.below(4)));
  auto r = check_op({random_tensor({2, 4, 3, 3}, rng)},
                    [&](std::vector<Var<double>>& v) { return loss_segmentation(v[0], labels); });
  EXPECT_LT(r.max_rel, kPerOpTol);
}

TEST(LossDepth, PerfectIsZeroAndRejectsNonPositive) {
  Rng rng(3);
  auto gt = random_tensor({2, 1, 3, 3}, rng, 0.5, 2.0);
  Tape<double> tape;
  EXPECT_EQ(loss_depth(tape.constant(gt), gt).value()[0], 0.0);
  auto bad = gt;
  bad[4] = 0.0;
  EXPECT_THROW(loss_depth(tape.constant(gt), bad), DataError);
}

TEST(LossDepth, GradCheck) {
  Rng rng(4);
  auto gt = random_tensor({2, 1, 3, 3}, rng, 0.5, 2.0);
  auto r = check_op({random_tensor({2, 1, 3, 3}, rng, 0.5, 2.0)},
                    [&](std::vector<Var<double>>& v) { return loss_depth(v[0], gt); });
  EXPECT_LT(r.max_rel, kPerOpTol);
}

TEST(LossNormal, PerfectIsZeroAntiparallelIsTwo) {
  Rng rng(5);
  auto gt = unit_normals({2, 3, 3, 3}, rng);
  Tape<double> tape;
  EXPECT_NEAR(loss_normal(tape.constant(gt), gt).value()[0], 0.0, 1e-12);
  auto neg = gt;
  for (auto& v : neg.values) v = -v;
  EXPECT_NEAR(loss_normal(tape.constant(neg), gt).value()[0], 2.0, 1e-12);
}

TEST(LossNormal, GradCheckThroughNormalisation) {
  Rng rng(6);
  auto gt = unit_normals({2, 3, 3, 3}, rng);
  auto r = check_op({random_tensor({2, 3, 3, 3}, rng)}, [&](std::vector<Var<double>>& v) {
    return loss_normal(ops::l2_normalize_channels(v[0]), gt);
  });
  EXPECT_LT(r.max_rel, kPerOpTol);
}

TEST(Kendall, ZeroLogVarianceIsUnitWeight) {
  Tape<double> tape;
  auto l = tape.constant(Tensor<double>({1}, 1.7));
  auto s = tape.constant(Tensor<double>({1}, 0.0));
  EXPECT_EQ(kendall_term(l, s).value()[0], 1.7);
  auto s1 = tape.constant(Tensor<double>({1}, 0.4));
  EXPECT_NEAR(kendall_term(l, s1).value()[0], std::exp(-0.4) * 1.7 + 0.2, 1e-15);
}

// ---------------------------------------------------------------------------
// Metrics

TEST(Metrics, PerfectPrediction) {
  std::vector<int> lab = {0, 1, 2, 2, 255, 1};
  EXPECT_EQ(metrics::miou(lab, lab, 3), 1.0);
  EXPECT_EQ(metrics::pixel_acc(lab, lab, 3), 1.0);
  std::vector<double> d = {1.0, 2.0, 3.0};
  EXPECT_EQ(metrics::rel(d, d), 0.0);
  EXPECT_EQ(metrics::rms(d, d), 0.0);
  std::vector<double> n = {0, 0, 1};
  EXPECT_EQ(metrics::mean_angle(n, n, 1, 1), 0.0);
}

TEST(Metrics, TwoClassHandExample) {
  EXPECT_DOUBLE_EQ(metrics::miou({0, 1, 1, 1}, {0, 0, 1, 1}, 2), 7.0 / 12.0);
}

TEST(Metrics, MatchBruteForceOracleExactly) {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const int K = 2 + static_cast<int>(rng.below(5));
    std::vector<int> p(64), g(64);
    for (int i = 0; i < 64; ++i) {
      p[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(static_cast<std::uint32_t>(K)));
      g[static_cast<std::size_t>(i)] = rng.bernoulli(0.1) ? 255 : static_cast<int>(rng.below(static_cast<std::uint32_t>(K)));
    }
    EXPECT_EQ(metrics::miou(p, g, K), oracle::miou(p, g, K));
    EXPECT_EQ(metrics::pixel_acc(p, g, K), oracle::pixacc(p, g));
    std::vector<double> dp(64), dg(64);
    for (int i = 0; i < 64; ++i) {
      dp[static_cast<std::size_t>(i)] = rng.uniform(0.1, 5.0);
      dg[static_cast<std::size_t>(i)] = rng.uniform(0.1, 5.0);
    }
    EXPECT_EQ(metrics::rel(dp, dg), oracle::rel(dp, dg));
    EXPECT_EQ(metrics::rms(dp, dg), oracle::rms(dp, dg));
    auto np = unit_normals({1, 3, 8, 8}, rng), ng = unit_normals({1, 3, 8, 8}, rng);
    EXPECT_EQ(metrics::mean_angle(np.values, ng.values, 1, 64), oracle::angle(np.values, ng.values, 64));
  }
}

TEST(Metrics, ArgmaxChannels) {
  Tensor<double> logits({1, 3, 1, 2}, std::vector<double>{0.1, 0.9, 0.5, 0.2, 0.3, 0.95});
  EXPECT_EQ(metrics::argmax_channels(logits), (std::vector<int>{1, 2}));
}

// ---------------------------------------------------------------------------
// Schedules and optimizers

TEST(PolyLr, EndpointsAndMidpoint) {
  EXPECT_EQ(optim::poly_lr(0, 30000, 0.01), 0.01);
  EXPECT_EQ(optim::poly_lr(30000, 30000, 0.01), 0.0);
  EXPECT_NEAR(optim::poly_lr(15000, 30000, 0.01), 0.0053589, 1e-7);
  EXPECT_NEAR(optim::poly_lr(15000, 30000, 0.01), 0.01 * std::pow(0.5, 0.9), 1e-15);
  EXPECT_THROW(optim::poly_lr(30001, 30000, 0.01), ContractError);
}

TEST(PolyLr, StrictlyDecreasing) {
  double prev = optim::poly_lr(0, 2000, 0.01);
  for (int i = 1; i <= 2000; ++i) {
    const double cur = optim::poly_lr(i, 2000, 0.01);
    ASSERT_LT(cur, prev);
    prev = cur;
  }
}

TEST(Sgd, ZeroGradZeroDecayIsNoOp) {
  ParamSet<double> ps;
  Rng rng(1);
  ps.add("w", random_tensor({3}, rng), Tag::shared());
  auto before = ps.at("w").value;
  ps.zero_grad();
  optim::Sgd<double> sgd(0.9, 0.0);
  sgd.step(ps, 0.1);
  EXPECT_EQ(ps.at("w").value, before);
}

TEST(Sgd, MatchesHandUnrolledRecurrence) {
  ParamSet<double> ps;
  Rng rng(2);
  ps.add("w", random_tensor({4}, rng), Tag::shared());
  ps.add("rm", random_tensor({2}, rng), Tag::shared(), false);
  const auto th0 = ps.at("w").value.values;
  const auto g1 = random_tensor({4}, rng).values, g2 = random_tensor({4}, rng).values;
  const double m = 0.9, wd = 1e-4, lr1 = 0.01, lr2 = 0.007;
  optim::Sgd<double> sgd(m, wd);
  ps.at("w").grad = g1;
  sgd.step(ps, lr1);
  ps.at("w").grad = g2;
  sgd.step(ps, lr2);
  for (std::size_t i = 0; i < 4; ++i) {
    const double v1 = g1[i] + wd * th0[i];
    const double th1 = th0[i] - lr1 * v1;
    const double v2 = m * v1 + g2[i] + wd * th1;
    const double th2 = th1 - lr2 * v2;
    EXPECT_NEAR(ps.at("w").value[i], th2, 1e-12);
  }
  ParamSet<double> missing;
  missing.add("w", Tensor<double>({1}), Tag::shared());
  EXPECT_THROW(sgd.step(missing, 0.1), ContractError);
}

TEST(Sgd, FirstStepIsPlainGradientStep) {
  ParamSet<double> ps;
  Rng rng(3);
  ps.add("w", random_tensor({4}, rng), Tag::shared());
  const auto th0 = ps.at("w").value.values;
  const auto g = random_tensor({4}, rng).values;
  ps.at("w").grad = g;
  optim::Sgd<double> sgd(0.9, 0.0);
  sgd.step(ps, 0.05);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(ps.at("w").value[i], th0[i] - 0.05 * g[i]);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamSet<double> ps;
  ps.add("w", Tensor<double>({2}, std::vector<double>{1.0, -1.0}), Tag::controller());
  ps.at("w").grad = {0.3, -2.0};
  optim::Adam<double> adam(1e-3);
  adam.step(ps);
  EXPECT_NEAR(ps.at("w").value[0], 1.0 - 1e-3, 1e-9);
  EXPECT_NEAR(ps.at("w").value[1], -1.0 + 1e-3, 1e-9);
}
