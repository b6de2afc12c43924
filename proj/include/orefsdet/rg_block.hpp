#pragma once

#include <string>
#include <vector>

#include "orefsdet/backbone.hpp"
#include "orefsdet/layers.hpp"

namespace orefsdet {

/// Channel-correlation 1x1 conv over concat(support, query): C_f x 2C_f x 1 x 1.
template <typename T>
struct RGParams {
  Var<T> weight;
  Var<T> bias;

  RGParams() = default;
  RGParams(std::size_t channels, Rng& rng)
      : weight(kaiming_uniform<T>({channels, 2 * channels, 1, 1}, 2 * channels, rng), true),
        bias(Tensor<T>({channels}), true) {}

  void collect(ParameterList<T>& p, const std::string& prefix) const {
    p.add(prefix + ".chan_corr.weight", weight);
    p.add(prefix + ".chan_corr.bias", bias);
  }
};

/// Depthwise kernels pooled from one mined support map.
template <typename T>
struct SupportKernels {
  Var<T> k1;   // C x 1 x 1
  Var<T> k31;  // C x 3 x 1
  Var<T> k13;  // C x 1 x 3
};

enum class GuidanceMode {
  kFull,        // 1x1 + strip correlations superimposed, then channel correlation
  kGlobalOnly,  // ablation: single pooled 1x1 depthwise kernel, nothing else
};

template <typename T>
SupportKernels<T> build_kernels(const Var<T>& support) {
  if (support.shape().size() != 3 || support.dim(1) < 3 || support.dim(2) < 3)
    throw ShapeError("build_kernels: support must be C x >=3 x >=3, got " + shape_str(support.shape()));
  return {adaptive_avg_pool(support, 1, 1), adaptive_avg_pool(support, 3, 1), adaptive_avg_pool(support, 1, 3)};
}

/// The sequential 3x1 then 1x3 strip correlation.
template <typename T>
Var<T> strip_correlation(const SupportKernels<T>& k, const Var<T>& query) {
  return depthwise_xcorr(depthwise_xcorr(query, k.k31), k.k13);
}

/// query + xcorr(query, k1) + strip path.
template <typename T>
Var<T> spatial_scale_correlation(const SupportKernels<T>& k, const Var<T>& query) {
  if (k.k1.dim(0) != query.dim(0)) throw ShapeError("spatial_scale_correlation: channel mismatch");
  return add(add(query, depthwise_xcorr(query, k.k1)), strip_correlation(k, query));
}

/// 1x1 conv over concat(global support mean broadcast, attention map).
template <typename T>
Var<T> channel_correlation(const Var<T>& support, const Var<T>& attn, const RGParams<T>& p) {
  if (support.dim(0) != attn.dim(0) || p.weight.dim(1) != 2 * attn.dim(0))
    throw ShapeError("channel_correlation: channel mismatch");
  Var<T> s = broadcast_hw(adaptive_avg_pool(support, 1, 1), attn.dim(1), attn.dim(2));
  return conv2d(concat<T>({s, attn}, 0), p.weight, std::optional<Var<T>>(p.bias));
}

/// Elementwise mean of K mined support pyramids.
template <typename T>
FeaturePyramid<T> support_prototype(const std::vector<FeaturePyramid<T>>& shots) {
  if (shots.empty()) throw ShapeError("support_prototype: need at least one shot");
  FeaturePyramid<T> out;
  for (std::size_t i = 0; i < 3; ++i) {
    Var<T> acc = shots[0][i];
    for (std::size_t k = 1; k < shots.size(); ++k) acc = add(acc, shots[k][i]);
    out[i] = shots.size() == 1 ? acc : scale(acc, T(1) / static_cast<T>(shots.size()));
  }
  return out;
}

/// Per-level attention maps from the (shot-averaged) mined support and the query.
template <typename T>
FeaturePyramid<T> guide(const FeaturePyramid<T>& prototype, const FeaturePyramid<T>& query, const RGParams<T>& p,
                        GuidanceMode mode = GuidanceMode::kFull) {
  FeaturePyramid<T> out;
  for (std::size_t i = 0; i < 3; ++i) {
    SupportKernels<T> k = build_kernels(prototype[i]);
    if (mode == GuidanceMode::kGlobalOnly)
      out[i] = depthwise_xcorr(query[i], k.k1);
    else
      out[i] = channel_correlation(prototype[i], spatial_scale_correlation(k, query[i]), p);
  }
  return out;
}

template <typename T>
FeaturePyramid<T> guide(const std::vector<FeaturePyramid<T>>& mined_shots, const FeaturePyramid<T>& query,
                        const RGParams<T>& p, GuidanceMode mode = GuidanceMode::kFull) {
  return guide(support_prototype(mined_shots), query, p, mode);
}

}  // namespace orefsdet
