#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "orefsdet/backbone.hpp"
#include "orefsdet/box.hpp"
#include "orefsdet/layers.hpp"
#include "orefsdet/proposal.hpp"

namespace orefsdet {

inline constexpr std::array<std::size_t, 2> kRoiResolutions{4, 8};

/// FPN level heuristic floor(4 + log2(sqrt(area) / 224)) clamped to [3, 5],
/// returned as a pyramid index (0 = P3).
inline std::size_t roi_level(const Box& b) {
  const double s = std::sqrt(std::max(b.area(), 1e-12));
  const double k = std::floor(4.0 + std::log2(s / 224.0));
  return static_cast<std::size_t>(std::clamp(k, 3.0, 5.0)) - 3;
}

template <typename T>
struct HeadParams {
  Conv2d<T> conv1, conv2, conv3;  // DSA matching convs
  GroupNorm<T> norm;               // on the aggregated map, before flattening
  Linear<T> fc1, fc2, cls, reg;
  std::size_t hidden = 128;
  static constexpr std::size_t kHeadGroups = 16;

  HeadParams() = default;
  HeadParams(std::size_t channels, std::size_t hidden_width, Rng& rng)
      : conv1(channels, channels / 2, 1, rng),
        conv2(channels, channels / 2, 1, rng),
        conv3(2 * channels, channels, 3, rng, {1, 1}),
        norm(channels, std::gcd(channels, kHeadGroups)),
        fc1(channels * kRoiResolutions[1] * kRoiResolutions[1], hidden_width, rng),
        fc2(hidden_width, hidden_width, rng),
        cls(hidden_width, 1, rng),
        reg(hidden_width, 4, rng),
        hidden(hidden_width) {
    if (channels % 2) throw ShapeError("HeadParams: channel count must be even");
    // Small output inits: refinements start near identity, p2 near 0.5.
    for (auto& v : reg.weight.mutable_value().values()) v *= static_cast<T>(0.01);
    for (auto& v : cls.weight.mutable_value().values()) v *= static_cast<T>(0.01);
  }

  void collect(ParameterList<T>& p, const std::string& prefix) const {
    conv1.collect(p, prefix + ".dsa.conv1");
    conv2.collect(p, prefix + ".dsa.conv2");
    conv3.collect(p, prefix + ".dsa.conv3");
    norm.collect(p, prefix + ".norm");
    fc1.collect(p, prefix + ".fc1");
    fc2.collect(p, prefix + ".fc2");
    cls.collect(p, prefix + ".cls");
    reg.collect(p, prefix + ".reg");
  }
};

/// Conv3(Cat(X, Y)) + Cat(Conv1(X), Conv2(Y)) for one RoI (C x r x r each).
template <typename T>
Var<T> dsa_fuse(const Var<T>& x, const Var<T>& y, const HeadParams<T>& p) {
  if (x.shape() != y.shape() || x.shape().size() != 3) throw ShapeError("dsa_fuse: support/query shapes differ");
  return add(p.conv3(concat<T>({x, y}, 0)), concat<T>({p.conv1(x), p.conv2(y)}, 0));
}

/// Batched form of dsa_fuse for one support prototype X (C x r x r) against N
/// query RoIs Y (N x C x r x r). Conv3 is split by input channels so the
/// support half is evaluated once; numerically the same map as dsa_fuse.
template <typename T>
Var<T> dsa_fuse_batched(const Var<T>& x, const Var<T>& y, const HeadParams<T>& p) {
  if (y.shape().size() != 4 || x.shape().size() != 3 || y.dim(1) != x.dim(0) || y.dim(2) != x.dim(1) ||
      y.dim(3) != x.dim(2))
    throw ShapeError("dsa_fuse_batched: expected C x r x r support and N x C x r x r queries");
  const std::size_t C = x.dim(0), N = y.dim(0);
  const Var<T>& w3 = p.conv3.weight;
  Var<T> sx = conv2d(x, slice(w3, 1, 0, C), std::optional<Var<T>>(p.conv3.bias), p.conv3.opt);
  Var<T> sy = conv2d(y, slice(w3, 1, C, C), std::optional<Var<T>>(), p.conv3.opt);
  // Conv1(X) occupies the low half of the channel concat, Conv2(Y) the high half.
  Var<T> support_part = add(sx, concat<T>({p.conv1(x), Var<T>(Tensor<T>({C / 2, x.dim(1), x.dim(2)}))}, 0));
  Var<T> query_part = add(sy, concat<T>({Var<T>(Tensor<T>({N, C / 2, y.dim(2), y.dim(3)})), p.conv2(y)}, 1));
  return add(query_part, repeat_batch(support_part, N));
}

/// bilinear_resize(g4 -> g8 extent) + g8. Accepts CxHxW or NxCxHxW.
template <typename T>
Var<T> dual_scale_aggregate(const Var<T>& g4, const Var<T>& g8) {
  const std::size_t r = g8.shape().size();
  return add(bilinear_resize(g4, g8.dim(r - 2), g8.dim(r - 1)), g8);
}

template <typename T>
struct HeadOutput {
  Var<T> logits;  // N x 1
  Var<T> deltas;  // N x 4
};

/// GroupNorm -> Flatten -> FC(128) -> ReLU -> FC(128) -> ReLU -> {classifier,
/// regressor}. Accepts C x 8 x 8 or N x C x 8 x 8.
template <typename T>
HeadOutput<T> head_forward(const Var<T>& agg, const HeadParams<T>& p) {
  const std::size_t n = agg.shape().size() == 4 ? agg.dim(0) : 1;
  Var<T> h = reshape(p.norm(agg), {n, agg.numel() / n});
  h = relu(p.fc2(relu(p.fc1(h))));
  return {p.cls(h), p.reg(h)};
}

template <typename T>
T head_probability(const HeadOutput<T>& out, std::size_t i) {
  return detail::sigmoid(out.logits.value()[i]);
}

/// Runs the second stage over `boxes`, grouped by pyramid level. Row k of the
/// output corresponds to boxes[order[k]].
template <typename T>
struct BatchedHeadOutput {
  HeadOutput<T> out;
  std::vector<std::size_t> order;
};

template <typename T>
BatchedHeadOutput<T> run_head(const FeaturePyramid<T>& query, const FeaturePyramid<T>& prototype,
                              const std::vector<Box>& boxes, const HeadParams<T>& p) {
  BatchedHeadOutput<T> res;
  std::vector<Var<T>> logits, deltas;
  for (std::size_t lvl = 0; lvl < 3; ++lvl) {
    std::vector<Box> group;
    for (std::size_t i = 0; i < boxes.size(); ++i)
      if (roi_level(boxes[i]) == lvl) {
        group.push_back(boxes[i]);
        res.order.push_back(i);
      }
    if (group.empty()) continue;
    const double scale_ = 1.0 / static_cast<double>(kPyramidStrides[lvl]);
    std::array<Var<T>, 2> fused;
    for (std::size_t k = 0; k < 2; ++k) {
      const std::size_t r = kRoiResolutions[k];
      Var<T> y = roi_align(query[lvl], group, scale_, r);
      Var<T> x = adaptive_avg_pool(prototype[lvl], r, r);
      fused[k] = dsa_fuse_batched(x, y, p);
    }
    HeadOutput<T> o = head_forward(dual_scale_aggregate(fused[0], fused[1]), p);
    logits.push_back(o.logits);
    deltas.push_back(o.deltas);
  }
  if (logits.empty()) return res;
  res.out.logits = logits.size() == 1 ? logits[0] : concat(logits, 0);
  res.out.deltas = deltas.size() == 1 ? deltas[0] : concat(deltas, 0);
  return res;
}

struct Stage2Sample {
  Box box;
  bool positive = false;
  std::array<double, 4> target{};  // encoded deltas to the matched gt
};

struct Stage2Options {
  double positive_iou = 0.6;
  std::size_t batch = 64;
  double positive_fraction = 0.5;
  double smooth_l1_beta = 1.0;
};

/// Labels candidates by max IoU with gt (positive iff >= threshold) and
/// samples up to `batch` of them with a capped positive fraction.
inline std::vector<Stage2Sample> sample_stage2(const std::vector<Box>& candidates, const std::vector<Box>& gt, Rng& rng,
                                               const Stage2Options& opt = {}, const BoxCoder& coder = {}) {
  std::vector<Stage2Sample> pos, neg;
  for (const Box& c : candidates) {
    if (!c.valid()) continue;
    double best = 0;
    std::size_t bi = 0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(c, gt[g]);
      if (v > best) {
        best = v;
        bi = g;
      }
    }
    Stage2Sample s{c, best >= opt.positive_iou, {}};
    if (s.positive) {
      s.target = coder.encode(c, gt[bi]);
      pos.push_back(s);
    } else {
      neg.push_back(s);
    }
  }
  auto shuffle = [&](std::vector<Stage2Sample>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
  };
  shuffle(pos);
  shuffle(neg);
  const std::size_t max_pos = static_cast<std::size_t>(opt.batch * opt.positive_fraction);
  if (pos.size() > max_pos) pos.resize(max_pos);
  const std::size_t n_neg = std::min(neg.size(), opt.batch - pos.size());
  pos.insert(pos.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(n_neg));
  return pos;
}

/// Mean BCE on p2 over sampled rows plus smooth-L1 on positive deltas, the
/// latter also divided by the sample count.
template <typename T>
Var<T> stage2_loss(const HeadOutput<T>& out, const std::vector<Stage2Sample>& samples,
                   const std::vector<std::size_t>& order, double beta = 1.0) {
  const std::size_t n = order.size();
  if (out.logits.dim(0) != n) throw ShapeError("stage2_loss: head rows do not match samples");
  Tensor<T> labels({n, 1}), targets({n, 4}), mask({n, 4});
  for (std::size_t k = 0; k < n; ++k) {
    const Stage2Sample& s = samples[order[k]];
    labels[k] = s.positive ? T(1) : T(0);
    if (s.positive)
      for (std::size_t j = 0; j < 4; ++j) {
        targets[k * 4 + j] = static_cast<T>(s.target[j]);
        mask[k * 4 + j] = T(1);
      }
  }
  const T norm = T(1) / static_cast<T>(std::max<std::size_t>(1, n));
  return scale(add(bce_with_logits_sum(out.logits, labels), smooth_l1_sum(out.deltas, targets, mask, static_cast<T>(beta))),
               norm);
}

struct Detection {
  Box box;
  double score = 0;  // p1 * p2
  double p1 = 0, p2 = 0;
  int label = 1;
};

struct DetectOptions {
  double nms_iou = 0.5;
  std::size_t max_detections = 100;
};

/// Second stage at inference: refine each proposal, score p1 * p2, NMS, top-k.
template <typename T>
std::vector<Detection> detect(const FeaturePyramid<T>& query, const FeaturePyramid<T>& prototype,
                              const std::vector<Proposal>& proposals, const HeadParams<T>& p, std::size_t image_h,
                              std::size_t image_w, DetectOptions opt = {}, const BoxCoder& coder = {}) {
  if (proposals.empty()) return {};
  std::vector<Box> boxes;
  for (const auto& pr : proposals) boxes.push_back(pr.box);
  BatchedHeadOutput<T> head = run_head(query, prototype, boxes, p);
  std::vector<Detection> dets;
  std::vector<ScoredBox> scored;
  for (std::size_t k = 0; k < head.order.size(); ++k) {
    const Proposal& pr = proposals[head.order[k]];
    const double p2 = detail::sigmoid(static_cast<double>(head.out.logits.value()[k]));
    std::array<double, 4> d{};
    for (std::size_t j = 0; j < 4; ++j) d[j] = static_cast<double>(head.out.deltas.value()[k * 4 + j]);
    Box refined = coder.decode(pr.box, d).clipped(static_cast<double>(image_w), static_cast<double>(image_h));
    if (!refined.valid()) continue;
    dets.push_back({refined, pr.p1 * p2, pr.p1, p2, 1});
    scored.push_back({refined, dets.back().score});
  }
  std::vector<Detection> out;
  for (std::size_t i : nms_indices(scored, opt.nms_iou)) {
    out.push_back(dets[i]);
    if (out.size() == opt.max_detections) break;
  }
  return out;
}

}  // namespace orefsdet
