#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "icsinet/losses.hpp"
#include "icsinet/optim.hpp"
#include "icsinet/random.hpp"

using namespace icsinet;

TEST(Dice, HandValues) {
  // p = t = {1,1,0,0}, smooth 1: 1 - (2*2 + 1) / (2 + 2 + 1) = 0.
  Tensor<double> t({1, 1, 2, 2}, {1, 1, 0, 0});
  EXPECT_NEAR(dice_loss(t, t, 1.0).item(), 0.0, 1e-15);
  // p = {0.5, 0.5, 0, 0}: 1 - (2 + 1) / (1 + 2 + 1) = 0.25; smooth 0 gives 1 - 2/3.
  Tensor<double> p({1, 1, 2, 2}, {0.5, 0.5, 0, 0});
  EXPECT_NEAR(dice_loss(p, t, 1.0).item(), 0.25, 1e-15);
  EXPECT_NEAR(dice_loss(p, t, 0.0).item(), 1.0 / 3.0, 1e-15);
  // Disjoint halves with smooth 1: 1 - 1/5 = 0.8.
  Tensor<double> q({1, 1, 2, 2}, {0, 0, 1, 1});
  EXPECT_NEAR(dice_loss(q, t, 1.0).item(), 0.8, 1e-15);
}

TEST(Dice, MeanOverClasses) {
  Tensor<double> t({1, 2, 1, 2}, {1, 1, 1, 1});
  Tensor<double> p({1, 2, 1, 2}, {1, 1, 0, 0});
  // class 0: 0; class 1: 1 - 1/3.
  EXPECT_NEAR(dice_loss(p, t, 1.0).item(), (2.0 / 3.0) / 2.0, 1e-15);
}

TEST(Euclidean, HandValues) {
  TipCoords<double> a{Tensor<double>({2, 2}, {0.0, 0.0, 0.5, 0.5})};
  TipCoords<double> b{Tensor<double>({2, 2}, {0.3, 0.4, 0.5, 0.5})};
  EXPECT_NEAR(euclidean_loss(a, b).item(), 0.25, 1e-15);
}

TEST(Euclidean, ZeroDistanceHasZeroGradient) {
  Tensor<double> x({1, 2}, {0.2, -0.1}, true);
  auto l = euclidean_loss(TipCoords<double>{x}, TipCoords<double>{x.detach()});
  backward(l);
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 0.0);
}

TEST(JensenShannon, IdenticalDisjointAndSymmetric) {
  Tensor<double> logits({1, 1, 2, 2}, {0.3, -1.0, 2.0, 0.5});
  const auto z = spatial_softmax(logits);
  EXPECT_NEAR(js_loss(z, Heatmap<double>{z.values.detach()}).item(), 0.0, 1e-12);

  // Near-one-hot logits versus a disjoint one-hot target.
  Tensor<double> sharp({1, 1, 1, 2}, {800.0, 0.0});
  Heatmap<double> other{Tensor<double>({1, 1, 2}, {0.0, 1.0})};
  EXPECT_NEAR(js_loss(spatial_softmax(sharp), other).item(), std::numbers::ln2, 1e-9);

  Rng rng(4);
  for (int k = 0; k < 20; ++k) {
    std::vector<double> a(6), b(6);
    for (auto& v : a) v = uniform(rng, -2, 2);
    for (auto& v : b) v = uniform(rng, -2, 2);
    const auto pa = spatial_softmax(Tensor<double>({1, 1, 2, 3}, a));
    const auto pb = spatial_softmax(Tensor<double>({1, 1, 2, 3}, b));
    EXPECT_NEAR(js_loss(pa, pb).item(), js_loss(pb, pa).item(), 1e-12);
  }
}

TEST(TotalLoss, CombinesTerms) {
  ModelConfig c;
  c.input_size = 16;
  c.depth = 1;
  c.channels = {2, 4};
  Model<double> m(c);
  Tensor<double> x({1, 1, 16, 16}, 0.5);
  Tensor<double> masks({1, 2, 16, 16}, 0.0);
  TipCoords<double> tip{Tensor<double>({1, 2}, {0.1, -0.2})};
  LossConfig lc;
  lc.lambda1 = 2.0;
  lc.lambda2 = 3.0;
  auto out = m.forward(x, Mode::Train);
  auto l = total_loss(out, masks, tip, lc);
  EXPECT_NEAR(l.total.item(), l.seg + 2.0 * l.euc + 3.0 * l.js, 1e-12);
  EXPECT_GT(l.seg, 0.0);
}

TEST(LossConfig, Validation) {
  LossConfig lc;
  lc.sigma = 0.0;
  EXPECT_THROW(lc.validate(), ConfigError);
  lc = {};
  lc.lambda1 = -1.0;
  EXPECT_THROW(lc.validate(), ConfigError);
}

namespace {

// f(theta) = theta^2 as a graph, returning the parameter tensor.
void quadratic_grad(Tensor<double>& theta) {
  theta.zero_grad();
  backward(sum(mul(theta, theta)));
}

}  // namespace

TEST(DiffGrad, OneStepHandValue) {
  // g = 2, xi = sigmoid(2), m_hat = 2, v_hat = 4, step = 1e-3 * xi * 2 / (2 + 1e-8).
  Tensor<double> theta({1}, {1.0}, true);
  std::vector<Tensor<double>> params{theta};
  auto state = OptimState<double>::init(params);
  OptimConfig cfg;
  quadratic_grad(theta);
  diffgrad_step<double>(params, state, cfg);
  EXPECT_NEAR(theta.data()[0], 0.9991192029220222, 1e-10);
  EXPECT_NEAR(theta.data()[0], 0.99911920, 1e-8);
  EXPECT_EQ(state.t, 1u);
}

TEST(DiffGrad, ConstantGradientIsHalfAdam) {
  // f = 3 * theta has a constant gradient, so xi = sigmoid(0) = 1/2 from the second step on.
  Tensor<double> theta({1}, {1.0}, true);
  std::vector<Tensor<double>> params{theta};
  auto state = OptimState<double>::init(params);
  OptimConfig cfg;
  for (int step = 1; step <= 10; ++step) {
    theta.zero_grad();
    backward(sum(scale(theta, 3.0)));
    const double before = theta.data()[0];
    // Reference Adam from the same state.
    const double g = 3.0;
    const double m = cfg.beta1 * state.m[0][0] + (1 - cfg.beta1) * g;
    const double v = cfg.beta2 * state.v[0][0] + (1 - cfg.beta2) * g * g;
    const double t = double(state.t + 1);
    const double m_hat = m / (1 - std::pow(cfg.beta1, t));
    const double v_hat = v / (1 - std::pow(cfg.beta2, t));
    const double adam_step = cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    diffgrad_step<double>(params, state, cfg);
    if (step >= 2) {
      EXPECT_EQ(theta.data()[0], before - 0.5 * adam_step) << "step " << step;
    }
  }
}

TEST(DiffGrad, ConvergesOnQuadratic) {
  Tensor<double> theta({1}, {1.0}, true);
  std::vector<Tensor<double>> params{theta};
  auto state = OptimState<double>::init(params);
  OptimConfig cfg;
  cfg.lr = 0.1;
  for (int i = 0; i < 50; ++i) {
    quadratic_grad(theta);
    diffgrad_step<double>(params, state, cfg);
  }
  EXPECT_LT(std::abs(theta.data()[0]), 0.5);
}

TEST(DiffGrad, MissingGradientCountsAsZeroAndStateMismatchThrows) {
  Tensor<double> theta({2}, {1.0, 2.0}, true);
  std::vector<Tensor<double>> params{theta};
  auto state = OptimState<double>::init(params);
  diffgrad_step<double>(params, state, OptimConfig{});
  EXPECT_EQ(theta.data()[0], 1.0);
  OptimState<double> empty;
  EXPECT_THROW(diffgrad_step<double>(params, empty, OptimConfig{}), ContractError);
}

TEST(DiffGrad, ScheduleScalesRate) {
  OptimConfig cfg;
  cfg.schedule = [](std::uint64_t step) { return step < 2 ? 1.0 : 0.5; };
  EXPECT_DOUBLE_EQ(cfg.lr_at(1), 1e-3);
  EXPECT_DOUBLE_EQ(cfg.lr_at(2), 5e-4);
  cfg.lr = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
