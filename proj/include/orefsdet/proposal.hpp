#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "orefsdet/backbone.hpp"
#include "orefsdet/box.hpp"
#include "orefsdet/layers.hpp"

namespace orefsdet {

struct Proposal {
  Box box;
  double p1 = 0;  // first-stage likelihood
  std::size_t level = 0;
};

/// Raw first-stage outputs for one pyramid level.
template <typename T>
struct LevelPrediction {
  Var<T> heatmap;  // 1 x H x W logits
  Var<T> size;     // 2 x H x W, log(width / stride), log(height / stride)
};

template <typename T>
using Stage1Prediction = std::array<LevelPrediction<T>, 3>;

/// Two shared conv towers (3x3 + GroupNorm + ReLU + 1x1) producing heatmap
/// logits and sizes.
template <typename T>
class ProposalHead {
 public:
  ProposalHead() = default;
  ProposalHead(std::size_t channels, std::size_t width, Rng& rng)
      : hm_conv_(channels, width, 3, rng, {1, 1}),
        hm_norm_(width, kTowerGroups),
        hm_out_(width, 1, 1, rng),
        size_conv_(channels, width, 3, rng, {1, 1}),
        size_norm_(width, kTowerGroups),
        size_out_(width, 2, 1, rng) {
    // Background prior of 0.01 on the heatmap.
    hm_out_.bias.mutable_value().fill(static_cast<T>(-std::log((1.0 - 0.01) / 0.01)));
    // Start sizes at ~6 cells, mid-range for the level assignment, not 1.
    size_out_.bias.mutable_value().fill(static_cast<T>(std::log(6.0)));
  }

  Stage1Prediction<T> predict(const FeaturePyramid<T>& attn) const {
    Stage1Prediction<T> out;
    for (std::size_t i = 0; i < 3; ++i) {
      out[i].heatmap = hm_out_(relu(hm_norm_(hm_conv_(attn[i]))));
      out[i].size = size_out_(relu(size_norm_(size_conv_(attn[i]))));
    }
    return out;
  }

  void collect(ParameterList<T>& p, const std::string& prefix) const {
    hm_conv_.collect(p, prefix + ".heatmap.conv");
    hm_norm_.collect(p, prefix + ".heatmap.norm");
    hm_out_.collect(p, prefix + ".heatmap.out");
    size_conv_.collect(p, prefix + ".size.conv");
    size_norm_.collect(p, prefix + ".size.norm");
    size_out_.collect(p, prefix + ".size.out");
  }

 private:
  static constexpr std::size_t kTowerGroups = 16;
  Conv2d<T> hm_conv_;
  GroupNorm<T> hm_norm_;
  Conv2d<T> hm_out_, size_conv_;
  GroupNorm<T> size_norm_;
  Conv2d<T> size_out_;
};

struct DecodeOptions {
  std::size_t max_proposals = 256;
  double score_floor = 0.01;
};

/// Local 3x3 maxima of sigmoid(heatmap) above the floor, merged over levels,
/// sorted by likelihood (ties: level, then row-major cell), truncated.
template <typename T>
std::vector<Proposal> decode(const Stage1Prediction<T>& preds, std::size_t image_h, std::size_t image_w,
                             DecodeOptions opt = {}) {
  std::vector<Proposal> cands;
  for (std::size_t lvl = 0; lvl < 3; ++lvl) {
    const Tensor<T>& hm = preds[lvl].heatmap.value();
    const Tensor<T>& sz = preds[lvl].size.value();
    const std::size_t H = hm.dim(1), W = hm.dim(2);
    const double stride = static_cast<double>(kPyramidStrides[lvl]);
    std::vector<double> prob(H * W);
    for (std::size_t i = 0; i < H * W; ++i) prob[i] = detail::sigmoid(static_cast<double>(hm[i]));
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        const double p = prob[r * W + c];
        if (!(p > opt.score_floor)) continue;
        bool peak = true;
        for (std::size_t rr = r ? r - 1 : 0; peak && rr <= std::min(H - 1, r + 1); ++rr)
          for (std::size_t cc = c ? c - 1 : 0; cc <= std::min(W - 1, c + 1); ++cc)
            if (prob[rr * W + cc] > p) {
              peak = false;
              break;
            }
        if (!peak) continue;
        const double cx = (static_cast<double>(c) + 0.5) * stride, cy = (static_cast<double>(r) + 0.5) * stride;
        const double w = std::exp(std::clamp(static_cast<double>(sz.at(0, r, c)), -10.0, 10.0)) * stride;
        const double h = std::exp(std::clamp(static_cast<double>(sz.at(1, r, c)), -10.0, 10.0)) * stride;
        Box b = Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h}.clipped(static_cast<double>(image_w),
                                                                                    static_cast<double>(image_h));
        if (!b.valid()) continue;
        cands.push_back({b, p, lvl});
      }
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Proposal& a, const Proposal& b) { return a.p1 > b.p1; });
  if (cands.size() > opt.max_proposals) cands.resize(opt.max_proposals);
  return cands;
}

/// Per-level CenterNet targets.
template <typename T>
struct Stage1Targets {
  std::array<Tensor<T>, 3> heatmap;  // 1 x H x W
  std::array<Tensor<T>, 3> size;     // 2 x H x W
  std::array<Tensor<T>, 3> mask;     // 2 x H x W, 1 at centre cells
  std::size_t num_centers = 0;
};

/// Level by longer side: <= 64 -> P3, <= 128 -> P4, else P5.
inline std::size_t assign_level(const Box& b) {
  const double side = std::max(b.width(), b.height());
  if (side <= 64.0) return 0;
  if (side <= 128.0) return 1;
  return 2;
}

/// CenterNet's Gaussian radius rule (min overlap 0.7), in cells.
inline double gaussian_radius(double h, double w, double min_overlap = 0.7) {
  const double b1 = h + w, c1 = w * h * (1 - min_overlap) / (1 + min_overlap);
  const double r1 = (b1 + std::sqrt(b1 * b1 - 4 * c1)) / 2;
  const double b2 = 2 * (h + w), c2 = (1 - min_overlap) * w * h;
  const double r2 = (b2 + std::sqrt(b2 * b2 - 16 * c2)) / 2;
  const double a3 = 4 * min_overlap, b3 = -2 * min_overlap * (h + w), c3 = (min_overlap - 1) * w * h;
  const double r3 = (b3 + std::sqrt(b3 * b3 - 4 * a3 * c3)) / 2;
  return std::min({r1, r2, r3});
}

template <typename T>
Stage1Targets<T> assign_targets(const std::vector<Box>& gt, std::size_t image_h, std::size_t image_w) {
  Stage1Targets<T> t;
  std::array<std::size_t, 3> hs{}, ws{};
  for (std::size_t l = 0; l < 3; ++l) {
    hs[l] = ceil_div(image_h, kPyramidStrides[l]);
    ws[l] = ceil_div(image_w, kPyramidStrides[l]);
    t.heatmap[l] = Tensor<T>({1, hs[l], ws[l]});
    t.size[l] = Tensor<T>({2, hs[l], ws[l]});
    t.mask[l] = Tensor<T>({2, hs[l], ws[l]});
  }
  for (const Box& b : gt) {
    if (!b.valid()) throw std::invalid_argument("assign_targets: degenerate box");
    const std::size_t l = assign_level(b);
    const double stride = static_cast<double>(kPyramidStrides[l]);
    const std::size_t H = hs[l], W = ws[l];
    const std::size_t cr = std::min(H - 1, static_cast<std::size_t>(std::max(0.0, std::floor(b.cy() / stride))));
    const std::size_t cc = std::min(W - 1, static_cast<std::size_t>(std::max(0.0, std::floor(b.cx() / stride))));
    const double fw = b.width() / stride, fh = b.height() / stride;
    const int radius = std::max(0, static_cast<int>(gaussian_radius(fh, fw)));
    const double sigma = (2.0 * radius + 1.0) / 6.0;
    Tensor<T>& hm = t.heatmap[l];
    for (int dy = -radius; dy <= radius; ++dy)
      for (int dx = -radius; dx <= radius; ++dx) {
        const long r = static_cast<long>(cr) + dy, c = static_cast<long>(cc) + dx;
        if (r < 0 || c < 0 || r >= static_cast<long>(H) || c >= static_cast<long>(W)) continue;
        const T v = (dx == 0 && dy == 0) ? T(1) : static_cast<T>(std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)));
        T& cell = hm.at(0, static_cast<std::size_t>(r), static_cast<std::size_t>(c));
        cell = std::max(cell, v);
      }
    t.size[l].at(0, cr, cc) = static_cast<T>(std::log(fw));
    t.size[l].at(1, cr, cc) = static_cast<T>(std::log(fh));
    t.mask[l].at(0, cr, cc) = T(1);
    t.mask[l].at(1, cr, cc) = T(1);
    ++t.num_centers;
  }
  return t;
}

struct Stage1LossOptions {
  double focal_alpha = 2.0;
  double focal_beta = 4.0;
  double size_weight = 0.1;
};

/// Focal heatmap loss plus weighted L1 size loss, both over max(1, #centres).
template <typename T>
Var<T> stage1_loss(const Stage1Prediction<T>& preds, const Stage1Targets<T>& targets, Stage1LossOptions opt = {}) {
  Var<T> focal, l1;
  for (std::size_t l = 0; l < 3; ++l) {
    Var<T> f = focal_loss_sum(preds[l].heatmap, targets.heatmap[l], static_cast<T>(opt.focal_alpha),
                              static_cast<T>(opt.focal_beta));
    Var<T> s = masked_l1_sum(preds[l].size, targets.size[l], targets.mask[l]);
    focal = l ? add(focal, f) : f;
    l1 = l ? add(l1, s) : s;
  }
  const T norm = T(1) / static_cast<T>(std::max<std::size_t>(1, targets.num_centers));
  return scale(add(focal, scale(l1, static_cast<T>(opt.size_weight))), norm);
}

}  // namespace orefsdet
