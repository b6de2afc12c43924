#include "helpers.hpp"
#include "oracles.hpp"

using namespace orefsdet;
using namespace testing_helpers;

TEST(Tensor, ShapeAndDataAgree) {
  EXPECT_THROW(TD({2, 3}, {1.0, 2.0}), ShapeError);
  TD t({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_THROW(t.reshaped({5, 5}), ShapeError);
}

TEST(Tensor, GradMatchesValueShape) {
  Rng rng(1);
  VD x(rand_t(rng, {3, 4, 5}), true);
  VD y = sum(mul(x, x));
  y.backward();
  ASSERT_TRUE(x.has_grad());
  EXPECT_EQ(x.grad().shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * x.value()[i]);
}

TEST(Tensor, GradientsAccumulateUntilZeroed) {
  VD x(TD({2}, {1.0, 2.0}), true);
  sum(x).backward();
  sum(x).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Tensor, NoGradGuardRecordsNothing) {
  VD x(TD({2}, {1.0, 2.0}), true);
  NoGradGuard ng;
  VD y = sum(mul(x, x));
  EXPECT_FALSE(y.requires_grad());
}

TEST(DepthwiseXcorr, OnesKernelIsIdentity) {
  Rng rng(2);
  TD q = rand_t(rng, {3, 5, 6});
  VD out = depthwise_xcorr(VD(q), VD(TD({3, 1, 1}, 1.0)));
  EXPECT_EQ(out.value(), q);
}

TEST(DepthwiseXcorr, ZeroKernelGivesZero) {
  Rng rng(3);
  VD out = depthwise_xcorr(VD(rand_t(rng, {2, 4, 4})), VD(TD({2, 3, 3})));
  for (double v : out.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(DepthwiseXcorr, MatchesLoopOracle) {
  Rng rng(4);
  TD q = rand_t(rng, {3, 5, 5}), k = rand_t(rng, {3, 3, 3});
  expect_close(depthwise_xcorr(VD(q), VD(k)).value(), oracle::depthwise_xcorr(q, k), 1e-5);
  for (int trial = 0; trial < 50; ++trial) {
    TD q2 = rand_t(rng, {pick(rng, 1, 4), pick(rng, 1, 9), pick(rng, 1, 9)});
    TD k2 = rand_t(rng, {q2.dim(0), 2 * pick(rng, 0, 3) + 1, 2 * pick(rng, 0, 3) + 1});
    expect_close(depthwise_xcorr(VD(q2), VD(k2)).value(), oracle::depthwise_xcorr(q2, k2), 1e-5);
  }
}

TEST(DepthwiseXcorr, RejectsBadShapes) {
  EXPECT_THROW(depthwise_xcorr(VD(TD({2, 4, 4})), VD(TD({3, 3, 3}))), ShapeError);
  EXPECT_THROW(depthwise_xcorr(VD(TD({2, 4, 4})), VD(TD({2, 2, 3}))), ShapeError);
}

TEST(DepthwiseXcorr, MacCountsDenseVsStrip) {
  const std::size_t C = 5, H = 7, W = 9;
  VD q(TD({C, H, W}, 1.0));
  {
    MacScope s;
    depthwise_xcorr(q, VD(TD({C, 3, 3}, 1.0)));
    EXPECT_EQ(s.elapsed(), static_cast<std::int64_t>(9 * C * H * W));
  }
  {
    MacScope s;
    depthwise_xcorr(depthwise_xcorr(q, VD(TD({C, 3, 1}, 1.0))), VD(TD({C, 1, 3}, 1.0)));
    EXPECT_EQ(s.elapsed(), static_cast<std::int64_t>(6 * C * H * W));
  }
}

TEST(Softmax, Basics) {
  VD s = softmax(VD(TD({2}, {0.0, 0.0})), 0);
  EXPECT_DOUBLE_EQ(s.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(s.value()[1], 0.5);
  VD z = softmax(reshape(VD(TD({2}, {1.0, 1.0})), {2, 1}), 0);
  EXPECT_EQ(z.shape(), (Shape{2, 1}));
  EXPECT_DOUBLE_EQ(z.value()[0], 0.5);
}

TEST(Softmax, ShiftInvariantAndNormalized) {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    TD x = rand_t(rng, {pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 4)}, -30, 30);
    const std::size_t axis = pick(rng, 0, 2);
    TD shifted = x;
    for (auto& v : shifted.values()) v += 123.0;
    TD a = softmax(VD(x), axis).value(), b = softmax(VD(shifted), axis).value();
    expect_close(a, b, 1e-12);
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < 3; ++i) inner *= x.dim(i);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        double s = 0;
        for (std::size_t k = 0; k < x.dim(axis); ++k) {
          const double v = a[(o * x.dim(axis) + k) * inner + in];
          EXPECT_GT(v, 0.0);
          s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
  }
  // large magnitudes stay finite
  EXPECT_TRUE(softmax(VD(TD({3}, {1000.0, -1000.0, 999.0})), 0).value().all_finite());
}

TEST(AdaptivePool, Examples) {
  VD ones(TD({1, 4, 4}, 1.0));
  EXPECT_DOUBLE_EQ(adaptive_avg_pool(ones, 1, 1).value()[0], 1.0);
  Rng rng(6);
  TD x = rand_t(rng, {2, 5, 4});
  EXPECT_EQ(adaptive_avg_pool(VD(x), 5, 4).value(), x);
  TD ramp({1, 5, 5});
  for (std::size_t i = 0; i < 25; ++i) ramp[i] = static_cast<double>(i);
  EXPECT_EQ(adaptive_avg_pool(VD(ramp), 3, 3).value(), oracle::adaptive_avg_pool(ramp, 3, 3));
  EXPECT_THROW(adaptive_avg_pool(VD(ramp), 6, 1), ShapeError);
}

TEST(AdaptivePool, GlobalMeanAndOracle) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    TD x = rand_t(rng, {pick(rng, 1, 3), pick(rng, 1, 11), pick(rng, 1, 11)});
    const std::size_t oh = pick(rng, 1, x.dim(1)), ow = pick(rng, 1, x.dim(2));
    expect_close(adaptive_avg_pool(VD(x), oh, ow).value(), oracle::adaptive_avg_pool(x, oh, ow), 1e-12);
    TD g = adaptive_avg_pool(VD(x), 1, 1).value();
    for (std::size_t c = 0; c < x.dim(0); ++c) {
      double m = 0;
      for (std::size_t i = 0; i < x.dim(1) * x.dim(2); ++i) m += x[c * x.dim(1) * x.dim(2) + i];
      EXPECT_NEAR(g[c], m / static_cast<double>(x.dim(1) * x.dim(2)), 1e-12);
    }
  }
}

TEST(Linear, Examples) {
  Rng rng(8);
  TD x = rand_t(rng, {3, 4});
  EXPECT_EQ(linear(VD(x), VD(identity(4)), std::optional<VD>(VD(TD({4})))).value(), x);
  TD b = rand_t(rng, {2});
  TD out = linear(VD(TD({3, 4})), VD(rand_t(rng, {4, 2})), std::optional<VD>(VD(b))).value();
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(out[r * 2 + c], b[c]);
  TD w = rand_t(rng, {4, 2});
  expect_close(linear(VD(x), VD(w), std::optional<VD>(VD(b))).value(), oracle::linear(x, w, &b), 1e-6);
  EXPECT_THROW(linear(VD(x), VD(rand_t(rng, {3, 2}))), ShapeError);
}

TEST(Conv2d, MatchesLoopOracle) {
  Rng rng(9);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t c = pick(rng, 1, 4), o = pick(rng, 1, 4), k = pick(rng, 1, 3);
    const std::size_t stride = pick(rng, 1, 2), pad = pick(rng, 0, 1);
    TD x = rand_t(rng, {c, pick(rng, k, 9), pick(rng, k, 9)});
    TD w = rand_t(rng, {o, c, k, k}), b = rand_t(rng, {o});
    TD got = conv2d(VD(x), VD(w), std::optional<VD>(VD(b)), {stride, pad}).value();
    expect_close(got, oracle::conv2d(x, w, &b, stride, pad), 1e-5);
  }
}

TEST(Conv2d, BatchedEqualsPerImage) {
  Rng rng(10);
  TD x = rand_t(rng, {3, 2, 6, 5}), w = rand_t(rng, {4, 2, 3, 3});
  TD got = conv2d(VD(x), VD(w), std::optional<VD>(), {1, 1}).value();
  for (std::size_t n = 0; n < 3; ++n) {
    TD xi({2, 6, 5}, std::span<const double>(x.data() + n * 60, 60));
    TD want = oracle::conv2d(xi, w, nullptr, 1, 1);
    for (std::size_t i = 0; i < want.numel(); ++i) EXPECT_NEAR(got[n * want.numel() + i], want[i], 1e-5);
  }
}

TEST(BilinearResize, MatchesTentOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    TD x = rand_t(rng, {pick(rng, 1, 3), pick(rng, 1, 8), pick(rng, 1, 8)});
    const std::size_t oh = pick(rng, 1, 16), ow = pick(rng, 1, 16);
    expect_close(bilinear_resize(VD(x), oh, ow).value(), oracle::bilinear_resize(x, oh, ow), 1e-5);
  }
  TD x = rand_t(rng, {2, 4, 5});
  expect_close(bilinear_resize(VD(x), 4, 5).value(), x, 1e-12);
}

TEST(MaxPool, MatchesWindowMaximum) {
  Rng rng(12);
  TD x = rand_t(rng, {2, 7, 6});
  TD got = max_pool2d(VD(x), 3, 2, 1).value();
  ASSERT_EQ(got.shape(), (Shape{2, 4, 3}));
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        double m = -1e300;
        for (long dy = 0; dy < 3; ++dy)
          for (long dx = 0; dx < 3; ++dx) {
            const long y = static_cast<long>(2 * i) - 1 + dy, xx = static_cast<long>(2 * j) - 1 + dx;
            if (y >= 0 && xx >= 0 && y < 7 && xx < 6) m = std::max(m, x.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(xx)));
          }
        EXPECT_EQ(got.at(c, i, j), m);
      }
}

TEST(Concat, SplitRoundTripsBitExactly) {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t axis = pick(rng, 0, 2);
    Shape a{pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)}, b = a;
    b[axis] = pick(rng, 1, 4);
    TD ta = rand_t(rng, a), tb = rand_t(rng, b);
    VD cat = concat<double>({VD(ta), VD(tb)}, axis);
    EXPECT_EQ(slice(cat, axis, 0, a[axis]).value(), ta);
    EXPECT_EQ(slice(cat, axis, a[axis], b[axis]).value(), tb);
  }
}

TEST(ElementwiseOps, AddMulMean) {
  VD a(TD({3}, {1.0, 2.0, 3.0})), b(TD({3}, {4.0, 5.0, 6.0}));
  EXPECT_EQ(add(a, b).value(), TD({3}, {5.0, 7.0, 9.0}));
  EXPECT_EQ(mul(a, b).value(), TD({3}, {4.0, 10.0, 18.0}));
  EXPECT_DOUBLE_EQ(mean(a).value()[0], 2.0);
  EXPECT_THROW(add(a, VD(TD({2}))), ShapeError);
}

TEST(Finiteness, ForwardOpsStayFinite) {
  Rng rng(14);
  TD x = rand_t(rng, {4, 6, 6}, -50, 50);
  VD v(x);
  EXPECT_TRUE(sigmoid(v).value().all_finite());
  EXPECT_TRUE(softmax(v, 0).value().all_finite());
  EXPECT_TRUE(group_norm(v, 2, VD(TD({4}, 1.0)), VD(TD({4}))).value().all_finite());
  EXPECT_TRUE(focal_loss_sum(VD(TD({1, 2, 2}, {-80.0, 80.0, 0.0, 30.0})), TD({1, 2, 2}, {1.0, 0.0, 0.5, 1.0})).value().all_finite());
}

TEST(ParameterCount, Examples) {
  EXPECT_EQ(count_parameters(ParameterList<float>()), 0u);
  Rng rng(15);
  Linear<float> fc(4, 4, rng);
  ParameterList<float> p;
  fc.collect(p, "fc");
  EXPECT_EQ(count_parameters(p), 20u);
}
