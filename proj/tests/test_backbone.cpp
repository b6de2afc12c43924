#include "helpers.hpp"

using namespace orefsdet;
using namespace testing_helpers;

namespace {

Image rand_image(Rng& rng, std::size_t h, std::size_t w) {
  Image img({3, h, w});
  for (auto& v : img.values()) v = static_cast<float>(uniform(rng));
  return img;
}

}  // namespace

TEST(Backbone, StrideArithmetic320) {
  Model m;
  Rng rng(1);
  NoGradGuard ng;
  FeaturePyramid<float> p = m.extract(rand_image(rng, 320, 320));
  EXPECT_EQ(p[0].shape(), (Shape{64, 40, 40}));
  EXPECT_EQ(p[1].shape(), (Shape{64, 20, 20}));
  EXPECT_EQ(p[2].shape(), (Shape{64, 10, 10}));
}

TEST(Backbone, StrideContractRandomSizes) {
  Model m;
  Rng rng(2);
  NoGradGuard ng;
  for (int trial = 0; trial < 6; ++trial) {
    const std::size_t h = pick(rng, 64, 512), w = pick(rng, 64, 512);
    FeaturePyramid<float> p = m.extract(rand_image(rng, h, w));
    for (std::size_t l = 0; l < 3; ++l) {
      EXPECT_EQ(p[l].dim(0), 64u);
      EXPECT_EQ(p[l].dim(1), ceil_div(h, kPyramidStrides[l])) << h << "x" << w;
      EXPECT_EQ(p[l].dim(2), ceil_div(w, kPyramidStrides[l])) << h << "x" << w;
    }
  }
}

TEST(Backbone, RejectsTinyImages) {
  Model m;
  NoGradGuard ng;
  EXPECT_THROW(m.extract(Image({3, 16, 64})), ShapeError);
}

TEST(Backbone, Deterministic) {
  Model a, b;
  Rng rng(3);
  const Image img = rand_image(rng, 96, 128);
  NoGradGuard ng;
  FeaturePyramid<float> pa = a.extract(img), pb = b.extract(img), pa2 = a.extract(img);
  for (std::size_t l = 0; l < 3; ++l) {
    EXPECT_EQ(pa[l].value(), pb[l].value());
    EXPECT_EQ(pa[l].value(), pa2[l].value());
  }
}

TEST(Backbone, ParameterBudgets) {
  Model m;
  EXPECT_LE(count_parameters(m.backbone_parameters()), 2'000'000u);
  EXPECT_LE(count_parameters(m.parameters()), 5'000'000u);
}

TEST(Model, ParameterNamesUnique) {
  Model m;
  std::set<std::string> names;
  for (const auto& p : m.parameters()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
  EXPECT_NE(m.parameters().find("rg.chan_corr.weight"), nullptr);
}

TEST(Model, RejectsUnsupportedHeadConfigs) {
  ModelConfig c;
  c.cascade_stages = 3;
  EXPECT_THROW(Model{c}, std::invalid_argument);
  c = {};
  c.roi_res = {7};
  EXPECT_THROW(Model{c}, std::invalid_argument);
}
