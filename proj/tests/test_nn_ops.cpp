#include <gtest/gtest.h>

#include <cmath>

#include "icsinet/model.hpp"
#include "icsinet/nn_ops.hpp"
#include "icsinet/random.hpp"

using namespace icsinet;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = uniform(rng, -1.0, 1.0);
  return Tensor<double>(std::move(shape), std::move(v));
}

}  // namespace

TEST(Coordinates, PixelNormalizedRoundTrip) {
  EXPECT_DOUBLE_EQ(pixel_to_normalized(0, 64), -63.0 / 64.0);
  EXPECT_DOUBLE_EQ(pixel_to_normalized(63, 64), 63.0 / 64.0);
  for (double i : {0.0, 3.5, 17.0, 127.0}) EXPECT_NEAR(normalized_to_pixel(pixel_to_normalized(i, 128), 128), i, 1e-12);
}

TEST(Conv2d, MatchesNaiveLoop) {
  Rng rng(3);
  for (std::size_t k : {1u, 3u}) {
    auto p = ConvParams<double>::create(3, 5, k);
    for (auto& v : p.weight.data()) v = uniform(rng, -1, 1);
    for (auto& v : p.bias.data()) v = uniform(rng, -1, 1);
    const auto x = random_tensor({2, 3, 7, 9}, rng);
    const auto y = conv2d(x, p);
    ASSERT_EQ(y.shape(), (Shape{2, 5, 7, 9}));
    const auto xd = x.data();
    const auto w = p.weight.data();
    const int r = int(k / 2);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t o = 0; o < 5; ++o)
        for (int i = 0; i < 7; ++i)
          for (int j = 0; j < 9; ++j) {
            double acc = p.bias.data()[o];
            for (std::size_t c = 0; c < 3; ++c)
              for (int di = -r; di <= r; ++di)
                for (int dj = -r; dj <= r; ++dj) {
                  const int yi = i + di, xj = j + dj;
                  if (yi < 0 || yi >= 7 || xj < 0 || xj >= 9) continue;
                  acc += w[((o * 3 + c) * k + std::size_t(di + r)) * k + std::size_t(dj + r)] *
                         xd[((n * 3 + c) * 7 + std::size_t(yi)) * 9 + std::size_t(xj)];
                }
            EXPECT_NEAR(y.data()[((n * 5 + o) * 7 + std::size_t(i)) * 9 + std::size_t(j)], acc, 1e-12);
          }
  }
}

TEST(Conv2d, FloatKernelMatchesDouble) {
  // Exercises the vectorized float path on widths above and below 16.
  Rng rng(9);
  for (std::size_t w : {8u, 16u, 33u}) {
    auto pd = ConvParams<double>::create(4, 6, 3);
    for (auto& v : pd.weight.data()) v = uniform(rng, -0.5, 0.5);
    const auto xd = random_tensor({1, 4, 10, w}, rng);
    auto pf = ConvParams<float>::create(4, 6, 3);
    for (std::size_t i = 0; i < pd.weight.numel(); ++i) pf.weight.data()[i] = float(pd.weight.data()[i]);
    const auto yd = conv2d(xd, pd);
    const auto yf = conv2d(cast<float>(xd), pf);
    for (std::size_t i = 0; i < yd.numel(); ++i) EXPECT_NEAR(yf.data()[i], yd.data()[i], 1e-5);
  }
}

TEST(Conv2d, ChannelMismatchThrows) {
  auto p = ConvParams<float>::create(3, 4, 3);
  EXPECT_THROW(conv2d(Tensor<float>({1, 2, 4, 4}), p), ShapeError);
}

TEST(Maxpool, ForwardAndTieRouting) {
  Tensor<double> x({1, 1, 2, 4}, {1, 5, 2, 2, 3, 4, 2, 2}, true);
  auto y = maxpool2x2(x);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_DOUBLE_EQ(y.data()[0], 5.0);
  EXPECT_DOUBLE_EQ(y.data()[1], 2.0);
  backward(sum(y));
  const std::vector<double> expect{0, 1, 1, 0, 0, 0, 0, 0};
  for (std::size_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], expect[i]) << i;
  EXPECT_THROW(maxpool2x2(Tensor<double>({1, 1, 3, 4})), ShapeError);
}

TEST(Upsample, HalfPixelOracle) {
  Tensor<double> x({1, 1, 1, 2}, {0.0, 2.0});
  auto y = upsample_bilinear2x(x);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 4}));
  const std::vector<double> row{0.0, 0.5, 1.5, 2.0};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(y.data()[i], row[i]);
    EXPECT_DOUBLE_EQ(y.data()[4 + i], row[i]);
  }
}

TEST(Concat, OrderPreserved) {
  Tensor<double> a({1, 1, 1, 2}, {1, 2}), b({1, 2, 1, 2}, {3, 4, 5, 6});
  auto c = concat_channels<double>({a, b});
  ASSERT_EQ(c.shape(), (Shape{1, 3, 1, 2}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(c.data()[i], double(i + 1));
  EXPECT_THROW(concat_channels<double>({a, Tensor<double>({1, 1, 2, 2})}), ShapeError);
}

TEST(BatchNorm, TrainNormalizesAndUpdatesRunningStats) {
  auto p = BatchNormParams<double>::create(1);
  Tensor<double> x({2, 1, 1, 2}, {1, 2, 3, 4});
  auto y = batchnorm2d(x, p, Mode::Train);
  double m = 0, v = 0;
  for (double t : y.data()) m += t / 4;
  for (double t : y.data()) v += (t - m) * (t - m) / 4;
  EXPECT_NEAR(m, 0.0, 1e-12);
  EXPECT_NEAR(v, 1.25 / (1.25 + 1e-5), 1e-9);
  EXPECT_DOUBLE_EQ(p.running_mean[0], 0.1 * 2.5);
  // Unbiased variance 5/3 blended with the initial 1.
  EXPECT_NEAR(p.running_var[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-12);
}

TEST(BatchNorm, EvalUsesRunningStatsOnly) {
  auto p = BatchNormParams<double>::create(1);
  p.running_mean[0] = 1.0;
  p.running_var[0] = 4.0;
  Tensor<double> x({1, 1, 1, 2}, {1, 5});
  auto y = batchnorm2d(x, p, Mode::Eval);
  EXPECT_NEAR(y.data()[0], 0.0, 1e-12);
  EXPECT_NEAR(y.data()[1], 4.0 / std::sqrt(4.0 + 1e-5), 1e-12);
  EXPECT_DOUBLE_EQ(p.running_mean[0], 1.0);
}

TEST(SpatialSoftmax, SumsToOne) {
  Rng rng(1);
  auto h = spatial_softmax(random_tensor({3, 1, 5, 6}, rng));
  ASSERT_EQ(h.values.shape(), (Shape{3, 5, 6}));
  for (std::size_t n = 0; n < 3; ++n) {
    double s = 0;
    for (std::size_t i = 0; i < 30; ++i) s += h.values.data()[n * 30 + i];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Dsnt, OneHotGridAndUniform) {
  const std::size_t S = 8;
  std::vector<double> v(S * S, 0.0);
  v[2 * S + 5] = 1.0;
  auto c = dsnt(Heatmap<double>{Tensor<double>({1, S, S}, v)});
  EXPECT_DOUBLE_EQ(c.xy.data()[0], (2.0 * 5 + 1 - S) / S);
  EXPECT_DOUBLE_EQ(c.xy.data()[1], (2.0 * 2 + 1 - S) / S);
  auto u = dsnt(Heatmap<double>{Tensor<double>({1, S, S}, 1.0 / (S * S))});
  EXPECT_NEAR(u.xy.data()[0], 0.0, 1e-15);
  EXPECT_NEAR(u.xy.data()[1], 0.0, 1e-15);
}

TEST(GaussianTarget, PeaksAtTipAndSumsToOne) {
  TipCoords<double> tip{Tensor<double>({1, 2}, {pixel_to_normalized(3, 16), pixel_to_normalized(10, 16)})};
  auto h = render_gaussian_target(tip, 16, 16, 1.0);
  const auto d = h.values.data();
  double s = 0;
  std::size_t arg = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    s += d[i];
    if (d[i] > d[arg]) arg = i;
  }
  EXPECT_NEAR(s, 1.0, 1e-12);
  EXPECT_EQ(arg, 10u * 16 + 3);
  EXPECT_FALSE(h.values.requires_grad());
}

TEST(Model, ParameterCounts) {
  EXPECT_EQ(Model<float>(ModelConfig{}).param_count(), 2733091u);
  ModelConfig small;
  small.input_size = 128;
  small.channels = {8, 16, 32, 64};
  EXPECT_EQ(Model<float>(small).param_count(), 171787u);
}

TEST(Model, OutputShapesAndRanges) {
  ModelConfig c;
  c.input_size = 32;
  c.depth = 2;
  c.channels = {4, 8, 16};
  Model<float> m(c);
  Rng rng(2);
  std::vector<float> v(2 * 32 * 32);
  for (auto& x : v) x = float(uniform01(rng));
  auto out = m.forward(Tensor<float>({2, 1, 32, 32}, v), Mode::Eval);
  EXPECT_EQ(out.seg.values.shape(), (Shape{2, 2, 32, 32}));
  EXPECT_EQ(out.heatmap.values.shape(), (Shape{2, 8, 8}));
  EXPECT_EQ(out.coords.xy.shape(), (Shape{2, 2}));
  for (float s : out.seg.values.data()) EXPECT_TRUE(s >= 0.0f && s <= 1.0f);
  for (float s : out.coords.xy.data()) EXPECT_TRUE(s >= -1.0f && s <= 1.0f);
}

TEST(Model, RejectsBadInput) {
  ModelConfig c;
  c.input_size = 32;
  c.depth = 2;
  c.channels = {4, 8, 16};
  Model<float> m(c);
  EXPECT_THROW(m.forward(Tensor<float>({1, 1, 16, 16}), Mode::Eval), ShapeError);
  EXPECT_THROW(m.forward(Tensor<float>({1, 3, 32, 32}), Mode::Eval), ShapeError);
  ModelConfig bad = c;
  bad.channels = {4, 8};
  EXPECT_THROW(Model<float>{bad}, ConfigError);
}

TEST(Model, InitializationIsSeeded) {
  ModelConfig c;
  c.input_size = 32;
  c.depth = 2;
  c.channels = {4, 8, 16};
  Model<float> a(c), b(c);
  c.seed = 5;
  Model<float> d(c);
  const auto pa = a.parameters(), pb = b.parameters(), pd = d.parameters();
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    for (std::size_t k = 0; k < pa[i].tensor.numel(); ++k) {
      EXPECT_EQ(pa[i].tensor.data()[k], pb[i].tensor.data()[k]);
      differs = differs || pa[i].tensor.data()[k] != pd[i].tensor.data()[k];
    }
  }
  EXPECT_TRUE(differs);
}
