#include <gtest/gtest.h>

#include <cmath>
#include <stdexcept>

#include "plunet/ops.hpp"
#include "test_util.hpp"

using namespace plunet;
using plunet::testing::dot;
using plunet::testing::max_abs_diff;
using plunet::testing::random_tensor;

namespace {

// Direct summation straight from the definition, grouped channels included.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b,
                           const ConvSpec& s) {
  const Shape os = s.output_shape(x.shape());
  Tensor<double> y(os);
  const std::int64_t cin_g = s.in_channels / s.groups;
  const std::int64_t cout_g = s.out_channels / s.groups;
  for (std::int64_t n = 0; n < os.n; ++n)
    for (std::int64_t o = 0; o < os.c; ++o) {
      const std::int64_t g = o / cout_g;
      for (std::int64_t i = 0; i < os.h; ++i)
        for (std::int64_t j = 0; j < os.w; ++j) {
          double acc = 0.0;
          for (std::int64_t c = 0; c < cin_g; ++c)
            for (std::int64_t u = 0; u < s.kernel[0]; ++u)
              for (std::int64_t v = 0; v < s.kernel[1]; ++v) {
                const std::int64_t r = i * s.stride[0] - s.padding[0] + u * s.dilation[0];
                const std::int64_t q = j * s.stride[1] - s.padding[1] + v * s.dilation[1];
                if (r < 0 || q < 0 || r >= x.shape().h || q >= x.shape().w) continue;
                acc += x.at(n, g * cin_g + c, r, q) * w.at(o, c, u, v);
              }
          if (b) acc += (*b)[o];
          y.at(n, o, i, j) = acc;
        }
    }
  return y;
}

}  // namespace

TEST(Conv2d, OnesKernelCountsNeighbours) {
  const auto spec = ConvSpec::same(1, 1, 3, 1, false);
  const Tensor<double> x(Shape{1, 1, 5, 5}, 1.0);
  const Tensor<double> w(spec.weight_shape(), 1.0);
  const auto y = ops::conv2d<double>(x, w, nullptr, spec);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(y.at(0, 0, 2, 2), 9.0);
  EXPECT_EQ(y.at(0, 0, 0, 0), 4.0);
  EXPECT_EQ(y.at(0, 0, 0, 2), 6.0);
}

TEST(Conv2d, DilatedOneHotSpreadsToNinePositions) {
  const auto spec = ConvSpec::same(1, 1, 3, 2, false);
  Tensor<double> x(Shape{1, 1, 9, 9});
  x.at(0, 0, 4, 4) = 1.0;
  const Tensor<double> w(spec.weight_shape(), 1.0);
  const auto y = ops::conv2d<double>(x, w, nullptr, spec);
  int nonzero = 0;
  for (std::int64_t i = 0; i < 9; ++i)
    for (std::int64_t j = 0; j < 9; ++j)
      if (y.at(0, 0, i, j) != 0.0) {
        ++nonzero;
        EXPECT_EQ((i - 4) % 2, 0);
        EXPECT_EQ((j - 4) % 2, 0);
      }
  EXPECT_EQ(nonzero, 9);
}

TEST(Conv2d, IdentityAndZeroKernels) {
  Rng rng(1);
  const auto spec = ConvSpec::same(3, 3, 3, 1, true);
  const auto x = random_tensor<double>(Shape{2, 3, 6, 7}, rng);
  Tensor<double> w(spec.weight_shape());
  for (std::int64_t c = 0; c < 3; ++c) w.at(c, c, 1, 1) = 1.0;
  const Tensor<double> b(spec.bias_shape());
  EXPECT_EQ(ops::conv2d(x, w, &b, spec), x);

  const Tensor<double> zero(spec.weight_shape());
  const Tensor<double> bias(spec.bias_shape(), std::vector<double>{0.5, -1.0, 2.0});
  const auto y = ops::conv2d(x, zero, &bias, spec);
  for (std::int64_t c = 0; c < 3; ++c) EXPECT_EQ(y.at(1, c, 3, 3), bias[c]);
}

TEST(Conv2d, LinearInInput) {
  Rng rng(2);
  const auto spec = ConvSpec::same(4, 5, 3, 2, false);
  const auto x1 = random_tensor<double>(Shape{2, 4, 7, 6}, rng);
  const auto x2 = random_tensor<double>(Shape{2, 4, 7, 6}, rng);
  const auto w = random_tensor<double>(spec.weight_shape(), rng);
  const double a = 0.7, c = -1.3;
  Tensor<double> mix(x1.shape());
  for (std::int64_t i = 0; i < mix.numel(); ++i) mix[i] = a * x1[i] + c * x2[i];
  const auto y = ops::conv2d<double>(mix, w, nullptr, spec);
  const auto y1 = ops::conv2d<double>(x1, w, nullptr, spec);
  const auto y2 = ops::conv2d<double>(x2, w, nullptr, spec);
  for (std::int64_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], a * y1[i] + c * y2[i], 1e-12);
}

TEST(Conv2d, GroupedMatchesPerChannelLoop) {
  Rng rng(3);
  ConvSpec spec = ConvSpec::same(4, 4, 3, 1, true);
  spec.groups = 4;
  const auto x = random_tensor<double>(Shape{1, 4, 5, 5}, rng);
  const auto w = random_tensor<double>(spec.weight_shape(), rng);
  const auto b = random_tensor<double>(spec.bias_shape(), rng);
  const auto y = ops::conv2d(x, w, &b, spec);
  const auto single = ConvSpec::same(1, 1, 3, 1, true);
  for (std::int64_t c = 0; c < 4; ++c) {
    Tensor<double> xc(Shape{1, 1, 5, 5}, std::vector<double>(x.plane(0, c), x.plane(0, c) + 25));
    Tensor<double> wc(single.weight_shape(), std::vector<double>(w.plane(c, 0), w.plane(c, 0) + 9));
    Tensor<double> bc(single.bias_shape(), b[c]);
    const auto yc = ops::conv2d(xc, wc, &bc, single);
    for (std::int64_t k = 0; k < 25; ++k) EXPECT_NEAR(y.plane(0, c)[k], yc[k], 1e-14);
  }
}

TEST(Conv2d, MatchesDirectSummationOnRandomSpecs) {
  Rng rng(4);
  for (int trial = 0; trial < 40; ++trial) {
    ConvSpec s;
    s.groups = 1 + static_cast<std::int64_t>(rng.index(3));
    s.in_channels = s.groups * (1 + static_cast<std::int64_t>(rng.index(3)));
    s.out_channels = s.groups * (1 + static_cast<std::int64_t>(rng.index(3)));
    for (int a = 0; a < 2; ++a) {
      s.kernel[a] = 1 + static_cast<std::int64_t>(rng.index(3));
      s.stride[a] = 1 + static_cast<std::int64_t>(rng.index(2));
      s.dilation[a] = 1 + static_cast<std::int64_t>(rng.index(2));
      s.padding[a] = static_cast<std::int64_t>(rng.index(3));
    }
    s.bias = rng.index(2) == 0;
    const Shape xs{1 + static_cast<std::int64_t>(rng.index(2)), s.in_channels, 7, 8};
    const auto x = random_tensor<double>(xs, rng);
    const auto w = random_tensor<double>(s.weight_shape(), rng);
    const auto b = random_tensor<double>(s.bias_shape(), rng);
    const auto* bp = s.bias ? &b : nullptr;
    const auto y = ops::conv2d(x, w, bp, s);
    const auto ref = conv_oracle(x, w, bp, s);
    ASSERT_EQ(y.shape(), ref.shape());
    EXPECT_LT(max_abs_diff(y, ref), 1e-12) << "trial " << trial;
  }
}

TEST(Conv2d, OutputShapeLaw) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    ConvSpec s;
    s.in_channels = 2;
    s.out_channels = 3;
    for (int a = 0; a < 2; ++a) {
      s.kernel[a] = 1 + static_cast<std::int64_t>(rng.index(5));
      s.stride[a] = 1 + static_cast<std::int64_t>(rng.index(3));
      s.dilation[a] = 1 + static_cast<std::int64_t>(rng.index(3));
      s.padding[a] = static_cast<std::int64_t>(rng.index(4));
    }
    const std::int64_t h = 10 + static_cast<std::int64_t>(rng.index(20));
    const std::int64_t w = 10 + static_cast<std::int64_t>(rng.index(20));
    const auto span = [&](std::int64_t in, int a) {
      return in + 2 * s.padding[a] - s.dilation[a] * (s.kernel[a] - 1) - 1;
    };
    if (span(h, 0) < 0 || span(w, 1) < 0) {
      EXPECT_THROW(s.output_shape(Shape{1, 2, h, w}), std::invalid_argument);
      continue;
    }
    const std::int64_t oh = span(h, 0) / s.stride[0] + 1, ow = span(w, 1) / s.stride[1] + 1;
    EXPECT_EQ(s.output_shape(Shape{1, 2, h, w}), (Shape{1, 3, oh, ow}));
  }
}

TEST(Conv2d, SamePaddingPreservesExtentForOddKernels) {
  for (std::int64_t k : {1, 3, 5})
    for (std::int64_t d : {1, 2, 3, 4}) {
      const auto s = ConvSpec::same(2, 2, k, d);
      EXPECT_EQ(s.output_shape(Shape{1, 2, 24, 16}), (Shape{1, 2, 24, 16}));
    }
}

TEST(Conv2d, RejectsBadGeometry) {
  ConvSpec s = ConvSpec::same(3, 4, 3);
  s.groups = 2;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  const auto ok = ConvSpec::same(3, 4, 3);
  EXPECT_THROW(ops::conv2d<float>(Tensor<float>(Shape{1, 2, 4, 4}), Tensor<float>(ok.weight_shape()), nullptr, ok),
               std::invalid_argument);
  EXPECT_THROW(ops::conv2d<float>(Tensor<float>(Shape{1, 3, 4, 4}), Tensor<float>(Shape{4, 3, 1, 1}), nullptr, ok),
               std::invalid_argument);
}

TEST(Conv2d, DepthwiseSeparableEqualsTwoStages) {
  Rng rng(6);
  const auto spec = ConvSpec::same(6, 10, 3, 2);
  const auto ds = ops::depthwise_stage(spec);
  const auto ps = ops::pointwise_stage(spec);
  EXPECT_EQ(ds.groups, 6);
  const auto x = random_tensor<float>(Shape{2, 6, 8, 8}, rng);
  const auto wd = random_tensor<float>(ds.weight_shape(), rng);
  const auto bd = random_tensor<float>(ds.bias_shape(), rng);
  const auto wp = random_tensor<float>(ps.weight_shape(), rng);
  const auto bp = random_tensor<float>(ps.bias_shape(), rng);
  const auto fused = ops::conv2d_depthwise_separable(x, wd, &bd, wp, &bp, spec);
  const auto staged = ops::conv2d(ops::conv2d(x, wd, &bd, ds), wp, &bp, ps);
  EXPECT_EQ(fused, staged);
}

TEST(ConvTranspose2d, MatchesScatterOracle) {
  Rng rng(7);
  const auto spec = ConvSpec::up2x2(3, 2);
  const auto x = random_tensor<double>(Shape{2, 3, 3, 4}, rng);
  const auto w = random_tensor<double>(Shape{3, 2, 2, 2}, rng);
  const auto b = random_tensor<double>(Shape{1, 2, 1, 1}, rng);
  const auto y = ops::conv_transpose2d(x, w, &b, spec);
  ASSERT_EQ(y.shape(), (Shape{2, 2, 6, 8}));
  Tensor<double> ref(y.shape());
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t o = 0; o < 2; ++o)
      for (std::int64_t i = 0; i < 6; ++i)
        for (std::int64_t j = 0; j < 8; ++j) ref.at(n, o, i, j) = b[o];
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t i = 0; i < 3; ++i)
        for (std::int64_t j = 0; j < 4; ++j)
          for (std::int64_t o = 0; o < 2; ++o)
            for (std::int64_t u = 0; u < 2; ++u)
              for (std::int64_t v = 0; v < 2; ++v) ref.at(n, o, 2 * i + u, 2 * j + v) += x.at(n, c, i, j) * w.at(c, o, u, v);
  EXPECT_LT(max_abs_diff(y, ref), 1e-13);
}

TEST(ConvTranspose2d, IsAdjointOfStridedConv) {
  Rng rng(8);
  // <T(x), y> == <x, C(y)> where C is the 2x2 stride-2 conv with the same taps.
  const auto up = ConvSpec::up2x2(3, 2, false);
  ConvSpec down;
  down.in_channels = 2;
  down.out_channels = 3;
  down.kernel = {2, 2};
  down.stride = {2, 2};
  down.bias = false;
  const auto x = random_tensor<double>(Shape{1, 3, 4, 5}, rng);
  const auto y = random_tensor<double>(Shape{1, 2, 8, 10}, rng);
  const auto w = random_tensor<double>(Shape{3, 2, 2, 2}, rng);
  const double lhs = dot(ops::conv_transpose2d<double>(x, w, nullptr, up), y);
  const double rhs = dot(x, ops::conv2d<double>(y, w, nullptr, down));
  EXPECT_NEAR(lhs, rhs, 1e-12 * std::max(1.0, std::abs(lhs)));
}

TEST(BatchNorm, TrainModeStandardises) {
  const Tensor<double> x(Shape{2, 1, 1, 1}, std::vector<double>{1.0, 3.0});
  const Tensor<double> g(Shape{1, 1, 1, 1}, 1.0), b(Shape{1, 1, 1, 1}, 0.0);
  Tensor<double> rm(Shape{1, 1, 1, 1}, 0.0), rv(Shape{1, 1, 1, 1}, 1.0);
  const auto y = ops::batchnorm2d(x, g, b, rm, rv, ops::BatchNormMode::train, {});
  EXPECT_NEAR(y[0], -1.0, 1e-5);
  EXPECT_NEAR(y[1], 1.0, 1e-5);
  EXPECT_NEAR(rm[0], 0.2, 1e-12);
  EXPECT_NEAR(rv[0], 0.9 + 0.1 * 1.0, 1e-12);
}

TEST(BatchNorm, EvalModeUsesRunningStatistics) {
  const Tensor<double> x(Shape{1, 2, 1, 2}, std::vector<double>{4, 6, 0, 1});
  const Tensor<double> g(Shape{1, 2, 1, 1}, std::vector<double>{2, 1});
  const Tensor<double> b(Shape{1, 2, 1, 1}, std::vector<double>{1, 0});
  Tensor<double> rm(Shape{1, 2, 1, 1}, std::vector<double>{5, 0});
  Tensor<double> rv(Shape{1, 2, 1, 1}, std::vector<double>{4, 1});
  const auto y = ops::batchnorm2d(x, g, b, rm, rv, ops::BatchNormMode::eval, {});
  EXPECT_NEAR(y[0], 2.0 * (-1.0) / std::sqrt(4.0 + 1e-5) + 1.0, 1e-12);
  EXPECT_NEAR(y[3], 1.0 / std::sqrt(1.0 + 1e-5), 1e-12);
  EXPECT_EQ(rm[0], 5.0);
}

TEST(BatchNorm, RejectsDegenerateAndMismatchedInputs) {
  Tensor<double> g(Shape{1, 1, 1, 1}, 1.0), b(Shape{1, 1, 1, 1}), rm(Shape{1, 1, 1, 1}), rv(Shape{1, 1, 1, 1}, 1.0);
  EXPECT_THROW(ops::batchnorm2d(Tensor<double>(Shape{1, 1, 1, 1}), g, b, rm, rv, ops::BatchNormMode::train, {}),
               std::invalid_argument);
  EXPECT_THROW(ops::batchnorm2d(Tensor<double>(Shape{2, 2, 2, 2}), g, b, rm, rv, ops::BatchNormMode::train, {}),
               std::invalid_argument);
}

TEST(Activations, ReluAndSigmoid) {
  const Tensor<double> x(Shape{1, 1, 1, 3}, std::vector<double>{-2.0, 0.0, 1.5});
  EXPECT_EQ(ops::relu(x).vec(), (std::vector<double>{0.0, 0.0, 1.5}));
  const Tensor<double> ones(x.shape(), 1.0);
  EXPECT_EQ(ops::relu_backward(x, ones).vec(), (std::vector<double>{0.0, 0.0, 1.0}));
  const Tensor<double> z(Shape{1, 1, 1, 2}, std::vector<double>{std::log(3.0), 0.0});
  const auto s = ops::sigmoid(z);
  EXPECT_NEAR(s[0], 0.75, 1e-15);
  EXPECT_EQ(s[1], 0.5);
  const Tensor<double> big(Shape{1, 1, 1, 2}, std::vector<double>{-800.0, 800.0});
  const auto sb = ops::sigmoid(big);
  EXPECT_TRUE(sb.all_finite());
  EXPECT_EQ(sb[1], 1.0);
}

TEST(Pooling, MaxpoolTakesFirstOnTies) {
  const Tensor<double> x(Shape{1, 1, 2, 2}, std::vector<double>{5, 5, 0, 0});
  std::vector<std::int64_t> arg;
  const auto y = ops::maxpool2d(x, &arg);
  EXPECT_EQ(y[0], 5.0);
  ASSERT_EQ(arg.size(), 1u);
  EXPECT_EQ(arg[0], 0);
  const auto dx = ops::maxpool2d_backward(x.shape(), arg, Tensor<double>(y.shape(), 1.0));
  EXPECT_EQ(dx.vec(), (std::vector<double>{1, 0, 0, 0}));
  EXPECT_THROW(ops::maxpool2d(Tensor<double>(Shape{1, 1, 3, 4})), std::invalid_argument);
}

TEST(Pooling, GlobalAverage) {
  const Tensor<double> x(Shape{1, 1, 2, 2}, std::vector<double>{0, 2, 4, 6});
  const auto y = ops::global_avg_pool(x);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 3.0);
  const auto dx = ops::global_avg_pool_backward(x.shape(), Tensor<double>(y.shape(), 1.0));
  EXPECT_EQ(dx.vec(), (std::vector<double>{0.25, 0.25, 0.25, 0.25}));
}

TEST(Concat, StacksChannelsAndSplitsBack) {
  const Tensor<double> a(Shape{2, 1, 1, 2}, std::vector<double>{1, 2, 3, 4});
  const Tensor<double> b(Shape{2, 2, 1, 2}, std::vector<double>{5, 6, 7, 8, 9, 10, 11, 12});
  const Tensor<double>* parts[] = {&a, &b};
  const auto y = ops::concat_channels<double>(parts);
  EXPECT_EQ(y.shape(), (Shape{2, 3, 1, 2}));
  EXPECT_EQ(y.vec(), (std::vector<double>{1, 2, 5, 6, 7, 8, 3, 4, 9, 10, 11, 12}));
  const std::int64_t ext[] = {1, 2};
  const auto back = ops::split_channels<double>(y, ext);
  EXPECT_EQ(back[0], a);
  EXPECT_EQ(back[1], b);
  const Tensor<double> c(Shape{2, 1, 2, 2});
  const Tensor<double>* bad[] = {&a, &c};
  EXPECT_THROW(ops::concat_channels<double>(bad), std::invalid_argument);
}

TEST(Linear, AffineMap) {
  const Tensor<double> x(Shape{1, 2, 1, 1}, std::vector<double>{2, 3});
  const Tensor<double> w(Shape{1, 2, 1, 1}, std::vector<double>{2, 1});
  const Tensor<double> b(Shape{1, 1, 1, 1}, -0.0);
  const auto y = ops::linear(x, w, &b);
  EXPECT_EQ(y[0], 7.0);
  const Tensor<double> w2(Shape{1, 1, 1, 1}, 2.0);
  const Tensor<double> x2(Shape{1, 1, 1, 1}, 3.0);
  const Tensor<double> b2(Shape{1, 1, 1, 1}, 1.0);
  EXPECT_EQ(ops::linear(x2, w2, &b2)[0], 7.0);
  EXPECT_THROW(ops::linear(Tensor<double>(Shape{1, 2, 2, 1}), w, &b), std::invalid_argument);
}

TEST(ScaleChannels, MultipliesEachPlane) {
  const Tensor<double> x(Shape{1, 2, 1, 2}, std::vector<double>{1, 2, 3, 4});
  const Tensor<double> s(Shape{1, 2, 1, 1}, std::vector<double>{0.5, -1});
  EXPECT_EQ(ops::scale_channels(x, s).vec(), (std::vector<double>{0.5, 1, -3, -4}));
}
