#pragma once

#include <array>
#include <string>
#include <vector>

#include "orefsdet/layers.hpp"

namespace orefsdet {

inline constexpr std::array<std::size_t, 3> kPyramidStrides{8, 16, 32};

/// P3/P4/P5 feature maps (strides 8/16/32), C_f channels each.
template <typename T>
struct FeaturePyramid {
  std::array<Var<T>, 3> levels;

  const Var<T>& operator[](std::size_t i) const { return levels[i]; }
  Var<T>& operator[](std::size_t i) { return levels[i]; }
  static constexpr std::size_t size() { return 3; }
};

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

/// Conv followed by GroupNorm; batch-size-1 training has no batch statistics.
template <typename T>
struct ConvGn {
  Conv2d<T> conv;
  GroupNorm<T> norm;

  ConvGn() = default;
  ConvGn(std::size_t in, std::size_t out, std::size_t k, Rng& rng, Conv2dOptions o = {})
      : conv(in, out, k, rng, o), norm(out, kBackboneGroups) {}

  Var<T> operator()(const Var<T>& x) const { return relu(norm(conv(x))); }

  void collect(ParameterList<T>& p, const std::string& prefix) const {
    conv.collect(p, prefix);
    norm.collect(p, prefix + ".gn");
  }

  static constexpr std::size_t kBackboneGroups = 8;
};

/// One-shot aggregation block: three chained 3x3 convs, the input and all
/// three outputs concatenated, then a 1x1 reduction.
template <typename T>
struct VovStage {
  ConvGn<T> down, c1, c2, c3, reduce;

  VovStage() = default;
  VovStage(std::size_t in, std::size_t mid, std::size_t out, Rng& rng)
      : down(in, mid, 3, rng, {2, 1}),
        c1(mid, mid, 3, rng, {1, 1}),
        c2(mid, mid, 3, rng, {1, 1}),
        c3(mid, mid, 3, rng, {1, 1}),
        reduce(4 * mid, out, 1, rng) {}

  Var<T> operator()(const Var<T>& x) const {
    Var<T> x0 = down(x);
    Var<T> x1 = c1(x0);
    Var<T> x2 = c2(x1);
    Var<T> x3 = c3(x2);
    return reduce(concat<T>({x0, x1, x2, x3}, 0));
  }

  void collect(ParameterList<T>& p, const std::string& prefix) const {
    down.collect(p, prefix + ".down");
    c1.collect(p, prefix + ".conv1");
    c2.collect(p, prefix + ".conv2");
    c3.collect(p, prefix + ".conv3");
    reduce.collect(p, prefix + ".reduce");
  }
};

struct BackboneConfig {
  std::size_t stem_width = 16;
  std::size_t stem_out = 24;
  std::array<std::size_t, 3> stage_mid{32, 48, 64};
  std::array<std::size_t, 3> stage_out{64, 96, 128};
  std::size_t fpn_channels = 64;
};

/// VoV-style backbone plus top-down FPN, shared by query and support images.
template <typename T>
class BackboneFpn {
 public:
  BackboneFpn() = default;
  BackboneFpn(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    stem1_ = ConvGn<T>(3, cfg.stem_width, 3, rng, {2, 1});
    stem2_ = ConvGn<T>(cfg.stem_width, cfg.stem_out, 3, rng, {2, 1});
    std::size_t in = cfg.stem_out;
    for (std::size_t i = 0; i < 3; ++i) {
      stages_[i] = VovStage<T>(in, cfg.stage_mid[i], cfg.stage_out[i], rng);
      in = cfg.stage_out[i];
    }
    for (std::size_t i = 0; i < 3; ++i) {
      lateral_[i] = Conv2d<T>(cfg.stage_out[i], cfg.fpn_channels, 1, rng);
      smooth_[i] = Conv2d<T>(cfg.fpn_channels, cfg.fpn_channels, 3, rng, {1, 1});
    }
  }

  std::size_t channels() const { return cfg_.fpn_channels; }

  /// image: 3 x H x W with H, W >= 32.
  FeaturePyramid<T> extract(const Var<T>& image) const {
    if (image.shape().size() != 3 || image.dim(0) != 3) throw ShapeError("extract: expected 3xHxW image");
    if (image.dim(1) < 32 || image.dim(2) < 32)
      throw ShapeError("extract: image " + shape_str(image.shape()) + " smaller than 32x32");
    Var<T> x = stem2_(stem1_(image));
    std::array<Var<T>, 3> c;
    for (std::size_t i = 0; i < 3; ++i) {
      x = stages_[i](x);
      c[i] = x;
    }
    FeaturePyramid<T> out;
    Var<T> top = lateral_[2](c[2]);
    out[2] = smooth_[2](top);
    for (std::size_t i = 2; i-- > 0;) {
      Var<T> lat = lateral_[i](c[i]);
      top = add(lat, bilinear_resize(top, lat.dim(1), lat.dim(2)));
      out[i] = smooth_[i](top);
    }
    return out;
  }

  void collect(ParameterList<T>& p, const std::string& prefix) const {
    stem1_.collect(p, prefix + ".stem1");
    stem2_.collect(p, prefix + ".stem2");
    for (std::size_t i = 0; i < 3; ++i) stages_[i].collect(p, prefix + ".stage" + std::to_string(i + 3));
    for (std::size_t i = 0; i < 3; ++i) {
      lateral_[i].collect(p, prefix + ".fpn.lateral" + std::to_string(i + 3));
      smooth_[i].collect(p, prefix + ".fpn.smooth" + std::to_string(i + 3));
    }
  }

 private:
  BackboneConfig cfg_;
  ConvGn<T> stem1_, stem2_;
  std::array<VovStage<T>, 3> stages_;
  std::array<Conv2d<T>, 3> lateral_, smooth_;
};

}  // namespace orefsdet
