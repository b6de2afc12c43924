#include "helpers.hpp"
#include "oracles.hpp"

using namespace orefsdet;
using namespace testing_helpers;

namespace {

HeadParams<double> rand_head(Rng& rng, std::size_t C, std::size_t hidden = 8) {
  HeadParams<double> p(C, hidden, rng);
  ParameterList<double> all;
  p.collect(all, "h");
  for (auto& e : all) {
    Var<double> v = e.var;
    for (auto& x : v.mutable_value().values()) x = uniform(rng, -0.5, 0.5);
  }
  return p;
}

void zero_all(HeadParams<double>& p) {
  ParameterList<double> all;
  p.collect(all, "h");
  for (auto& e : all) {
    Var<double> v = e.var;
    v.mutable_value().fill(0.0);
  }
}

}  // namespace

TEST(RoiAlign, ConstantMapGivesConstantCells) {
  Rng rng(1);
  VD f(TD({3, 10, 12}, 1.75));
  for (int trial = 0; trial < 20; ++trial) {
    Box b = rand_box(rng, 12 * 8, 10 * 8);
    for (std::size_t res : {4u, 8u}) {
      TD out = roi_align(f, {b}, 1.0 / 8, res).value();
      EXPECT_EQ(out.shape(), (Shape{1, 3, res, res}));
      for (double v : out.values()) EXPECT_NEAR(v, 1.75, 1e-12);
    }
  }
}

TEST(RoiAlign, GridAlignedBoxOnRampHasAnalyticMeans) {
  // f(y, x) = 3y + x, so bilinear sampling is exact and each bin averages to
  // its centre value.
  TD f({1, 8, 8});
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) f.at(0, y, x) = 3.0 * y + x;
  const Box b{1, 2, 5, 6};  // feature coords, scale 1
  TD out = roi_align(VD(f), {b}, 1.0, 4).value();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const double cy = 2 + i + 0.5 - 0.5, cx = 1 + j + 0.5 - 0.5;
      EXPECT_NEAR(out[i * 4 + j], 3 * cy + cx, 1e-12);
    }
}

TEST(RoiAlign, MatchesDenseTentOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t H = pick(rng, 2, 12), W = pick(rng, 2, 12);
    TD f = rand_t(rng, {pick(rng, 1, 3), H, W});
    std::vector<Box> boxes;
    const double scale = 1.0 / static_cast<double>(kPyramidStrides[pick(rng, 0, 2)]);
    for (std::size_t n = pick(rng, 1, 4); n > 0; --n) {
      // some boxes extend past the map to exercise the boundary rule
      const double x1 = uniform(rng, -4, W + 2) / scale, y1 = uniform(rng, -4, H + 2) / scale;
      boxes.push_back({x1, y1, x1 + uniform(rng, 0.5, W) / scale, y1 + uniform(rng, 0.5, H) / scale});
    }
    const std::size_t res = pick(rng, 0, 1) ? 8 : 4;
    expect_close(roi_align(VD(f), boxes, scale, res).value(), oracle::roi_align(f, boxes, scale, res), 1e-5);
  }
  EXPECT_THROW(roi_align(VD(TD({1, 4, 4})), {Box{3, 3, 3, 5}}, 1.0, 4), ShapeError);
}

TEST(Dsa, ZeroWeightsGiveZero) {
  Rng rng(3);
  HeadParams<double> p(4, 8, rng);
  zero_all(p);
  TD out = dsa_fuse(VD(rand_t(rng, {4, 4, 4})), VD(rand_t(rng, {4, 4, 4})), p).value();
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Dsa, PassThroughReproducesQueryHalf) {
  Rng rng(4);
  const std::size_t C = 4;
  HeadParams<double> p(C, 8, rng);
  zero_all(p);
  // Conv2 copies the first C/2 query channels into the upper half of the output.
  TD w2({C / 2, C, 1, 1});
  for (std::size_t o = 0; o < C / 2; ++o) w2[o * C + o] = 1.0;
  p.conv2.weight = VD(w2);
  TD y = rand_t(rng, {C, 8, 8});
  TD out = dsa_fuse(VD(TD({C, 8, 8})), VD(y), p).value();
  for (std::size_t c = 0; c < C / 2; ++c)
    for (std::size_t i = 0; i < 64; ++i) {
      EXPECT_EQ(out[c * 64 + i], 0.0);
      EXPECT_EQ(out[(C / 2 + c) * 64 + i], y[c * 64 + i]);
    }
}

TEST(Dsa, MatchesTranscription) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t C = 2 * pick(rng, 1, 3), r = pick(rng, 0, 1) ? 8 : 4;
    HeadParams<double> p = rand_head(rng, C);
    TD x = rand_t(rng, {C, r, r}), y = rand_t(rng, {C, r, r});
    TD want = oracle::dsa(x, y, p.conv1.weight.value(), p.conv1.bias.value(), p.conv2.weight.value(),
                          p.conv2.bias.value(), p.conv3.weight.value(), p.conv3.bias.value());
    expect_close(dsa_fuse(VD(x), VD(y), p).value(), want, 1e-5);
    // batched form: one support against several queries
    TD ys = rand_t(rng, {3, C, r, r});
    TD got = dsa_fuse_batched(VD(x), VD(ys), p).value();
    for (std::size_t n = 0; n < 3; ++n) {
      TD yn({C, r, r}, std::span<const double>(ys.data() + n * C * r * r, C * r * r));
      TD wn = oracle::dsa(x, yn, p.conv1.weight.value(), p.conv1.bias.value(), p.conv2.weight.value(),
                          p.conv2.bias.value(), p.conv3.weight.value(), p.conv3.bias.value());
      for (std::size_t i = 0; i < wn.numel(); ++i) EXPECT_NEAR(got[n * wn.numel() + i], wn[i], 1e-5);
    }
  }
  HeadParams<double> p = rand_head(rng, 4);
  EXPECT_THROW(dsa_fuse(VD(TD({4, 4, 4})), VD(TD({4, 8, 8})), p), ShapeError);
}

TEST(Dsa, DualScaleAggregate) {
  TD out = dual_scale_aggregate(VD(TD({2, 4, 4}, 1.5)), VD(TD({2, 8, 8}, -0.25))).value();
  for (double v : out.values()) EXPECT_DOUBLE_EQ(v, 1.25);
  Rng rng(6);
  TD g8 = rand_t(rng, {3, 8, 8}), g4 = rand_t(rng, {3, 4, 4});
  EXPECT_EQ(dual_scale_aggregate(VD(TD({3, 4, 4})), VD(g8)).value(), g8);
  TD want = oracle::bilinear_resize(g4, 8, 8);
  want += g8;
  expect_close(dual_scale_aggregate(VD(g4), VD(g8)).value(), want, 1e-5);
}

TEST(Head, ZeroParamsGiveHalfAndZeroDeltas) {
  Rng rng(7);
  HeadParams<double> p(4, 8, rng);
  zero_all(p);
  HeadOutput<double> o = head_forward(VD(rand_t(rng, {4, 8, 8})), p);
  EXPECT_DOUBLE_EQ(head_probability(o, 0), 0.5);
  for (double d : o.deltas.value().values()) EXPECT_EQ(d, 0.0);
}

TEST(Head, ProbabilityInOpenUnitInterval) {
  Rng rng(8);
  HeadParams<double> p = rand_head(rng, 4);
  for (int trial = 0; trial < 20; ++trial) {
    HeadOutput<double> o = head_forward(VD(rand_t(rng, {4, 8, 8}, -3, 3)), p);
    const double p2 = head_probability(o, 0);
    EXPECT_GT(p2, 0.0);
    EXPECT_LT(p2, 1.0);
  }
}

TEST(Head, ParameterCountClosedForm) {
  Rng rng(9);
  const std::size_t C = 64, F = 128;
  HeadParams<float> p(C, F, rng);
  ParameterList<float> all;
  p.collect(all, "roi_head");
  const std::size_t dsa = 2 * (C * (C / 2) + C / 2) + (2 * C * C * 9 + C);
  const std::size_t norm = 2 * C;
  const std::size_t fc = (C * 64 * F + F) + (F * F + F) + (F + 1) + (F * 4 + 4);
  EXPECT_EQ(count_parameters(all), dsa + norm + fc);
  EXPECT_EQ(p.hidden, 128u);
}

TEST(Stage2, LossLimits) {
  const BoxCoder coder;
  const Box gt{10, 10, 60, 80};
  std::vector<Stage2Sample> pos{{gt, true, coder.encode(gt, gt)}};
  HeadOutput<double> o{VD(TD({1, 1}, 30.0)), VD(TD({1, 4}))};
  EXPECT_LT(stage2_loss(o, pos, {0}).value()[0], 1e-3);
  std::vector<Stage2Sample> neg(3);
  HeadOutput<double> n{VD(TD({3, 1}, -30.0)), VD(TD({3, 4}, 5.0))};
  EXPECT_LT(stage2_loss(n, neg, {0, 1, 2}).value()[0], 1e-3);
}

TEST(Stage2, MatchesTranscription) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = pick(rng, 1, 8);
    std::vector<Stage2Sample> s(n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    for (auto& x : s) {
      x.positive = uniform(rng) < 0.5;
      for (auto& t : x.target) t = uniform(rng, -2, 2);
    }
    TD logits = rand_t(rng, {n, 1}, -4, 4), deltas = rand_t(rng, {n, 4}, -3, 3);
    std::vector<double> lg;
    std::vector<std::array<double, 4>> dl, tg;
    std::vector<bool> pv;
    for (std::size_t k = 0; k < n; ++k) {
      lg.push_back(logits[k]);
      dl.push_back({deltas[k * 4], deltas[k * 4 + 1], deltas[k * 4 + 2], deltas[k * 4 + 3]});
      pv.push_back(s[order[k]].positive);
      tg.push_back(s[order[k]].target);
    }
    EXPECT_NEAR(stage2_loss(HeadOutput<double>{VD(logits), VD(deltas)}, s, order).value()[0],
                oracle::stage2(lg, dl, pv, tg), 1e-6);
  }
}

TEST(Stage2, SamplingLabelsByIou) {
  Rng rng(11);
  const std::vector<Box> gt{{0, 0, 100, 100}};
  const std::vector<Box> cands{{0, 0, 100, 100}, {0, 0, 100, 70}, {0, 0, 100, 50}, {200, 200, 220, 220}};
  auto s = sample_stage2(cands, gt, rng);
  ASSERT_EQ(s.size(), 4u);
  std::size_t positives = 0;
  for (const auto& x : s) {
    const bool want = iou(x.box, gt[0]) >= 0.6;
    EXPECT_EQ(x.positive, want);
    positives += x.positive;
  }
  EXPECT_EQ(positives, 2u);
  Stage2Options small;
  small.batch = 2;
  auto capped = sample_stage2(cands, gt, rng, small);
  EXPECT_EQ(capped.size(), 2u);
  EXPECT_EQ(std::count_if(capped.begin(), capped.end(), [](const auto& x) { return x.positive; }), 1);
}

TEST(Detect, EmptyProposalsGiveNoDetections) {
  Model m;
  FeaturePyramid<float> q, s;
  EXPECT_TRUE(detect(q, s, {}, m.head(), 320, 320).empty());
}

TEST(Detect, ScoresAreExactProductsAndNmsHolds) {
  Model m;
  Rng rng(12);
  Image img({3, 256, 320});
  for (auto& v : img.values()) v = static_cast<float>(uniform(rng));
  Image sup({3, 240, 240});
  for (auto& v : sup.values()) v = static_cast<float>(uniform(rng));
  NoGradGuard ng;
  FeaturePyramid<float> q = m.extract(img);
  SupportEncoding<float> enc = m.encode_support({m.extract(sup)});
  std::vector<Proposal> props;
  for (int i = 0; i < 60; ++i) {
    Box b = rand_box(rng, 320, 256, 8);
    props.push_back({b, uniform(rng), assign_level(b)});
  }
  auto dets = detect(q, enc.prototype, props, m.head(), 256, 320);
  ASSERT_FALSE(dets.empty());
  EXPECT_LE(dets.size(), 100u);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    EXPECT_EQ(dets[i].score, dets[i].p1 * dets[i].p2);
    EXPECT_GE(dets[i].score, 0.0);
    EXPECT_LE(dets[i].score, 1.0);
    if (i) {
      EXPECT_GE(dets[i - 1].score, dets[i].score);
    }
    for (std::size_t j = 0; j < i; ++j) EXPECT_LE(iou(dets[i].box, dets[j].box), 0.5);
  }
}
