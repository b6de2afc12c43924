#pragma once

#include <functional>
#include <string>
#include <vector>

#include "orefsdet/gradcheck.hpp"
#include "orefsdet/proposal.hpp"
#include "orefsdet/rg_block.hpp"
#include "orefsdet/roi_head.hpp"
#include "orefsdet/sm_block.hpp"

namespace orefsdet {

/// One randomized gradient-check instance: a scalar function and its inputs.
struct GradInstance {
  ScalarFn fn;
  std::vector<Tensor<double>> inputs;
};

struct GradCase {
  std::string name;
  std::function<GradInstance(Rng&)> make;
};

namespace detail {

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + uniform_index(rng, hi - lo + 1); }

inline Tensor<double> rand_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.values()) v = uniform(rng, lo, hi);
  return t;
}

/// Values bounded away from zero (keeps kinks out of the difference stencil).
inline Tensor<double> rand_nonzero(Rng& rng, Shape s) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.values()) v = (uniform(rng) < 0.5 ? -1.0 : 1.0) * uniform(rng, 0.05, 1.0);
  return t;
}

/// Contracts any output with a fixed random weight so every entry matters.
inline Var<double> project(const Var<double>& y, const Tensor<double>& r) { return sum(mul(y, Var<double>(r))); }

inline Tensor<double> like(Rng& rng, const Shape& s) { return rand_tensor(rng, s); }

inline Shape chw(Rng& rng, std::size_t cmax = 3, std::size_t smax = 5) {
  return {pick(rng, 1, cmax), pick(rng, 1, smax), pick(rng, 1, smax)};
}

/// Output shape of a unary op, discovered by a throwaway forward pass.
template <typename F>
Shape out_shape(F&& f, const std::vector<Tensor<double>>& xs) {
  NoGradGuard ng;
  std::vector<Var<double>> v;
  for (const auto& t : xs) v.emplace_back(t);
  return f(v).shape();
}

template <typename F>
GradInstance projected(Rng& rng, F f, std::vector<Tensor<double>> inputs) {
  const Tensor<double> r = like(rng, out_shape(f, inputs));
  return {[f, r](const std::vector<Var<double>>& v) { return project(f(v), r); }, std::move(inputs)};
}

inline HeadParams<double> head_from(const std::vector<Var<double>>& v, std::size_t first, std::size_t C, std::size_t hidden) {
  Rng dummy(0);
  HeadParams<double> p(C, hidden, dummy);
  p.conv1.weight = v[first + 0];
  p.conv1.bias = v[first + 1];
  p.conv2.weight = v[first + 2];
  p.conv2.bias = v[first + 3];
  p.conv3.weight = v[first + 4];
  p.conv3.bias = v[first + 5];
  p.fc1.weight = v[first + 6];
  p.fc1.bias = v[first + 7];
  p.fc2.weight = v[first + 8];
  p.fc2.bias = v[first + 9];
  p.cls.weight = v[first + 10];
  p.cls.bias = v[first + 11];
  p.reg.weight = v[first + 12];
  p.reg.bias = v[first + 13];
  return p;
}

inline std::vector<Tensor<double>> head_tensors(Rng& rng, std::size_t C, std::size_t hidden) {
  const std::size_t flat = C * 64;
  const double a = 1.0 / std::sqrt(static_cast<double>(flat));
  return {rand_tensor(rng, {C / 2, C, 1, 1}),     rand_tensor(rng, {C / 2}),
          rand_tensor(rng, {C / 2, C, 1, 1}),     rand_tensor(rng, {C / 2}),
          rand_tensor(rng, {C, 2 * C, 3, 3}, -0.3, 0.3), rand_tensor(rng, {C}),
          rand_tensor(rng, {flat, hidden}, -a, a), rand_tensor(rng, {hidden}),
          rand_tensor(rng, {hidden, hidden}),     rand_tensor(rng, {hidden}),
          rand_tensor(rng, {hidden, 1}),          rand_tensor(rng, {1}),
          rand_tensor(rng, {hidden, 4}),          rand_tensor(rng, {4})};
}

}  // namespace detail

/// Every differentiable op and composite block, each with a randomized
/// instance generator (shapes vary per draw).
inline std::vector<GradCase> gradient_cases() {
  using detail::pick;
  using detail::projected;
  using detail::rand_nonzero;
  using detail::rand_tensor;
  using V = std::vector<Var<double>>;
  std::vector<GradCase> cs;

  cs.push_back({"add", [](Rng& r) {
                  Shape s = detail::chw(r);
                  return projected(r, [](const V& v) { return add(v[0], v[1]); }, {rand_tensor(r, s), rand_tensor(r, s)});
                }});
  cs.push_back({"sub", [](Rng& r) {
                  Shape s = detail::chw(r);
                  return projected(r, [](const V& v) { return sub(v[0], v[1]); }, {rand_tensor(r, s), rand_tensor(r, s)});
                }});
  cs.push_back({"mul", [](Rng& r) {
                  Shape s = detail::chw(r);
                  return projected(r, [](const V& v) { return mul(v[0], v[1]); }, {rand_tensor(r, s), rand_tensor(r, s)});
                }});
  cs.push_back({"scale", [](Rng& r) {
                  const double k = uniform(r, -2, 2);
                  return projected(r, [k](const V& v) { return scale(v[0], k); }, {rand_tensor(r, detail::chw(r))});
                }});
  cs.push_back({"relu", [](Rng& r) {
                  return projected(r, [](const V& v) { return relu(v[0]); }, {rand_nonzero(r, detail::chw(r))});
                }});
  cs.push_back({"sigmoid", [](Rng& r) {
                  return projected(r, [](const V& v) { return sigmoid(v[0]); }, {rand_tensor(r, detail::chw(r), -3, 3)});
                }});
  cs.push_back({"sum", [](Rng& r) {
                  Tensor<double> x = rand_tensor(r, detail::chw(r));
                  return GradInstance{[](const V& v) { return scale(sum(v[0]), 0.7); }, {x}};
                }});
  cs.push_back({"mean", [](Rng& r) {
                  Tensor<double> x = rand_tensor(r, detail::chw(r));
                  return GradInstance{[](const V& v) { return mul(mean(v[0]), mean(v[0])); }, {x}};
                }});
  cs.push_back({"reshape", [](Rng& r) {
                  Shape s = detail::chw(r);
                  const std::size_t n = shape_numel(s);
                  return projected(r, [n](const V& v) { return reshape(v[0], {n}); }, {rand_tensor(r, s)});
                }});
  cs.push_back({"permute", [](Rng& r) {
                  Shape s{pick(r, 1, 3), pick(r, 1, 3), pick(r, 1, 3), pick(r, 1, 3)};
                  std::vector<std::size_t> axes{0, 1, 2, 3};
                  for (std::size_t i = 4; i > 1; --i) std::swap(axes[i - 1], axes[uniform_index(r, i)]);
                  return projected(r, [axes](const V& v) { return permute(v[0], axes); }, {rand_tensor(r, s)});
                }});
  cs.push_back({"concat", [](Rng& r) {
                  const std::size_t axis = pick(r, 0, 2);
                  Shape a = detail::chw(r), b = a;
                  b[axis] = pick(r, 1, 4);
                  return projected(r, [axis](const V& v) { return concat<double>({v[0], v[1]}, axis); },
                                   {rand_tensor(r, a), rand_tensor(r, b)});
                }});
  cs.push_back({"slice", [](Rng& r) {
                  Shape s = detail::chw(r, 4, 5);
                  const std::size_t axis = pick(r, 0, 2);
                  const std::size_t start = pick(r, 0, s[axis] - 1), count = pick(r, 1, s[axis] - start);
                  return projected(r, [=](const V& v) { return slice(v[0], axis, start, count); }, {rand_tensor(r, s)});
                }});
  cs.push_back({"softmax", [](Rng& r) {
                  Shape s = detail::chw(r);
                  const std::size_t axis = pick(r, 0, 2);
                  return projected(r, [axis](const V& v) { return softmax(v[0], axis); }, {rand_tensor(r, s, -2, 2)});
                }});
  cs.push_back({"linear", [](Rng& r) {
                  const std::size_t n = pick(r, 1, 4), in = pick(r, 1, 5), out = pick(r, 1, 5);
                  return projected(r, [](const V& v) { return linear(v[0], v[1], std::optional<Var<double>>(v[2])); },
                                   {rand_tensor(r, {n, in}), rand_tensor(r, {in, out}), rand_tensor(r, {out})});
                }});
  cs.push_back({"conv2d", [](Rng& r) {
                  const std::size_t c = pick(r, 1, 3), o = pick(r, 1, 3), k = pick(r, 1, 3);
                  const Conv2dOptions opt{pick(r, 1, 2), pick(r, 0, 1)};
                  const bool batched = uniform(r) < 0.5;
                  Shape xs = batched ? Shape{pick(r, 1, 2), c, pick(r, k, 6), pick(r, k, 6)} : Shape{c, pick(r, k, 6), pick(r, k, 6)};
                  return projected(r, [opt](const V& v) { return conv2d(v[0], v[1], std::optional<Var<double>>(v[2]), opt); },
                                   {rand_tensor(r, xs), rand_tensor(r, {o, c, k, k}), rand_tensor(r, {o})});
                }});
  cs.push_back({"depthwise_xcorr", [](Rng& r) {
                  const std::size_t c = pick(r, 1, 3);
                  const std::size_t kh = 2 * pick(r, 0, 1) + 1, kw = 2 * pick(r, 0, 1) + 1;
                  return projected(r, [](const V& v) { return depthwise_xcorr(v[0], v[1]); },
                                   {rand_tensor(r, {c, pick(r, 1, 6), pick(r, 1, 6)}), rand_tensor(r, {c, kh, kw})});
                }});
  cs.push_back({"adaptive_avg_pool", [](Rng& r) {
                  Shape s = detail::chw(r, 3, 7);
                  const std::size_t oh = pick(r, 1, s[1]), ow = pick(r, 1, s[2]);
                  return projected(r, [=](const V& v) { return adaptive_avg_pool(v[0], oh, ow); }, {rand_tensor(r, s)});
                }});
  cs.push_back({"max_pool2d", [](Rng& r) {
                  Shape s{pick(r, 1, 3), pick(r, 3, 6), pick(r, 3, 6)};
                  const std::size_t k = pick(r, 2, 3), st = pick(r, 1, 2), pad = pick(r, 0, 1);
                  // Distinct values keep the arg-max stable under perturbation.
                  Tensor<double> x(s);
                  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = 0.01 * static_cast<double>(i);
                  for (std::size_t i = x.numel(); i > 1; --i) std::swap(x[i - 1], x[uniform_index(r, i)]);
                  return projected(r, [=](const V& v) { return max_pool2d(v[0], k, st, pad); }, {x});
                }});
  cs.push_back({"bilinear_resize", [](Rng& r) {
                  Shape s = detail::chw(r, 3, 6);
                  const std::size_t oh = pick(r, 1, 9), ow = pick(r, 1, 9);
                  return projected(r, [=](const V& v) { return bilinear_resize(v[0], oh, ow); }, {rand_tensor(r, s)});
                }});
  cs.push_back({"channel_mul", [](Rng& r) {
                  Shape s = detail::chw(r);
                  return projected(r, [](const V& v) { return channel_mul(v[0], v[1]); },
                                   {rand_tensor(r, s), rand_tensor(r, {s[0]})});
                }});
  cs.push_back({"broadcast_hw", [](Rng& r) {
                  const std::size_t c = pick(r, 1, 4), h = pick(r, 1, 4), w = pick(r, 1, 4);
                  return projected(r, [=](const V& v) { return broadcast_hw(v[0], h, w); }, {rand_tensor(r, {c, 1, 1})});
                }});
  cs.push_back({"repeat_batch", [](Rng& r) {
                  const std::size_t n = pick(r, 1, 3);
                  return projected(r, [n](const V& v) { return repeat_batch(v[0], n); }, {rand_tensor(r, detail::chw(r))});
                }});
  cs.push_back({"roi_align", [](Rng& r) {
                  const std::size_t c = pick(r, 1, 2), h = pick(r, 3, 7), w = pick(r, 3, 7), res = pick(r, 1, 3);
                  std::vector<Box> boxes;
                  for (std::size_t i = pick(r, 1, 3); i > 0; --i) {
                    const double x1 = uniform(r, 0, 2.0 * w), y1 = uniform(r, 0, 2.0 * h);
                    boxes.push_back({x1, y1, x1 + uniform(r, 1, 2.0 * w), y1 + uniform(r, 1, 2.0 * h)});
                  }
                  return projected(r, [=](const V& v) { return roi_align(v[0], boxes, 0.5, res); },
                                   {rand_tensor(r, {c, h, w})});
                }});
  cs.push_back({"group_norm", [](Rng& r) {
                  const std::size_t g = pick(r, 1, 3), c = g * pick(r, 1, 2);
                  Shape s{c, pick(r, 2, 4), pick(r, 2, 4)};
                  return projected(r, [g](const V& v) { return group_norm(v[0], g, v[1], v[2], 1e-5); },
                                   {rand_tensor(r, s), rand_tensor(r, {c}), rand_tensor(r, {c})});
                }});
  cs.push_back({"focal_loss", [](Rng& r) {
                  Shape s{1, pick(r, 2, 5), pick(r, 2, 5)};
                  Tensor<double> target = rand_tensor(r, s, 0.0, 0.95);
                  target[uniform_index(r, target.numel())] = 1.0;
                  return GradInstance{[target](const V& v) { return focal_loss_sum(v[0], target); },
                                      {rand_tensor(r, s, -3, 3)}};
                }});
  cs.push_back({"masked_l1", [](Rng& r) {
                  Shape s{2, pick(r, 2, 4), pick(r, 2, 4)};
                  Tensor<double> target = rand_tensor(r, s), mask(s);
                  for (auto& m : mask.values()) m = uniform(r) < 0.5 ? 1.0 : 0.0;
                  Tensor<double> pred = target;
                  for (auto& p : pred.values()) p += (uniform(r) < 0.5 ? -1 : 1) * uniform(r, 0.05, 1.0);
                  return GradInstance{[=](const V& v) { return masked_l1_sum(v[0], target, mask); }, {pred}};
                }});
  cs.push_back({"bce_with_logits", [](Rng& r) {
                  Shape s{pick(r, 1, 6), 1};
                  Tensor<double> y(s);
                  for (auto& t : y.values()) t = uniform(r) < 0.5 ? 1.0 : 0.0;
                  return GradInstance{[y](const V& v) { return bce_with_logits_sum(v[0], y); }, {rand_tensor(r, s, -4, 4)}};
                }});
  cs.push_back({"smooth_l1", [](Rng& r) {
                  Shape s{pick(r, 1, 5), 4};
                  Tensor<double> target = rand_tensor(r, s), mask(s);
                  for (auto& m : mask.values()) m = uniform(r) < 0.7 ? 1.0 : 0.0;
                  Tensor<double> pred = target;
                  // Keep |pred - target| away from the quadratic/linear switch at beta.
                  for (auto& p : pred.values()) p += (uniform(r) < 0.5 ? -1 : 1) * (uniform(r) < 0.5 ? uniform(r, 0.05, 0.9) : uniform(r, 1.1, 2.0));
                  return GradInstance{[=](const V& v) { return smooth_l1_sum(v[0], target, mask, 1.0); }, {pred}};
                }});

  // Composite blocks.
  cs.push_back({"sm_block", [](Rng& r) {
                  const std::size_t S = pick(r, 1, 2), H = pick(r, 2, 3), C = S * H, hid = pick(r, 1, 2);
                  return projected(r,
                                   [S](const V& v) {
                                     SMParams<double> p;
                                     p.w_h = v[1];
                                     p.w_w = v[2];
                                     p.r1 = v[3];
                                     p.r2 = v[4];
                                     p.segments = S;
                                     return sm_block(v[0], p);
                                   },
                                   {rand_tensor(r, {C, H, H}), rand_tensor(r, {C, C}), rand_tensor(r, {C, C}),
                                    rand_tensor(r, {C, hid}), rand_tensor(r, {hid, 2 * C})});
                }});
  cs.push_back({"rg_block", [](Rng& r) {
                  const std::size_t C = pick(r, 1, 3);
                  std::vector<Tensor<double>> in;
                  for (int l = 0; l < 3; ++l) in.push_back(rand_tensor(r, {C, pick(r, 3, 4), pick(r, 3, 4)}));
                  for (int l = 0; l < 3; ++l) in.push_back(rand_tensor(r, {C, pick(r, 2, 5), pick(r, 2, 5)}));
                  in.push_back(rand_tensor(r, {C, 2 * C, 1, 1}));
                  in.push_back(rand_tensor(r, {C}));
                  std::vector<Tensor<double>> proj;
                  for (int l = 0; l < 3; ++l) proj.push_back(rand_tensor(r, in[3 + l].shape()));
                  return GradInstance{[proj](const V& v) {
                                        FeaturePyramid<double> s{{v[0], v[1], v[2]}}, q{{v[3], v[4], v[5]}};
                                        RGParams<double> p;
                                        p.weight = v[6];
                                        p.bias = v[7];
                                        FeaturePyramid<double> a = guide(s, q, p);
                                        Var<double> acc = detail::project(a[0], proj[0]);
                                        for (int l = 1; l < 3; ++l) acc = add(acc, detail::project(a[l], proj[l]));
                                        return acc;
                                      },
                                      in};
                }});
  cs.push_back({"dsa_fuse", [](Rng& r) {
                  const std::size_t C = 2 * pick(r, 1, 2), res = pick(r, 2, 4);
                  std::vector<Tensor<double>> in{rand_tensor(r, {C, res, res}), rand_tensor(r, {C, res, res})};
                  for (auto& t : detail::head_tensors(r, C, 2)) in.push_back(t);
                  return projected(r, [C](const V& v) { return dsa_fuse(v[0], v[1], detail::head_from(v, 2, C, 2)); }, in);
                }});
  cs.push_back({"dsa_fuse_batched", [](Rng& r) {
                  const std::size_t C = 2 * pick(r, 1, 2), res = pick(r, 2, 3), n = pick(r, 1, 2);
                  std::vector<Tensor<double>> in{rand_tensor(r, {C, res, res}), rand_tensor(r, {n, C, res, res})};
                  for (auto& t : detail::head_tensors(r, C, 2)) in.push_back(t);
                  return projected(r, [C](const V& v) { return dsa_fuse_batched(v[0], v[1], detail::head_from(v, 2, C, 2)); },
                                   in);
                }});
  cs.push_back({"dual_scale_aggregate", [](Rng& r) {
                  const std::size_t C = pick(r, 1, 3);
                  return projected(r, [](const V& v) { return dual_scale_aggregate(v[0], v[1]); },
                                   {rand_tensor(r, {C, 4, 4}), rand_tensor(r, {C, 8, 8})});
                }});
  cs.push_back({"head", [](Rng& r) {
                  const std::size_t C = 2, hid = pick(r, 2, 3), n = pick(r, 1, 2);
                  std::vector<Tensor<double>> in{rand_tensor(r, {n, C, 8, 8})};
                  for (auto& t : detail::head_tensors(r, C, hid)) in.push_back(t);
                  const Tensor<double> pc = rand_tensor(r, {n, 1}), pr = rand_tensor(r, {n, 4});
                  return GradInstance{[=](const V& v) {
                                        HeadOutput<double> o = head_forward(v[0], detail::head_from(v, 1, C, hid));
                                        return add(detail::project(o.logits, pc), detail::project(o.deltas, pr));
                                      },
                                      in};
                }});
  cs.push_back({"stage1_loss", [](Rng& r) {
                  const std::size_t H = 8 * pick(r, 4, 6), W = 8 * pick(r, 4, 6);
                  std::vector<Box> gt;
                  for (std::size_t i = pick(r, 1, 2); i > 0; --i) {
                    const double w = uniform(r, 8, 40), h = uniform(r, 8, 40);
                    const double x = uniform(r, 0, W - w), y = uniform(r, 0, H - h);
                    gt.push_back({x, y, x + w, y + h});
                  }
                  const Stage1Targets<double> tg = assign_targets<double>(gt, H, W);
                  std::vector<Tensor<double>> in;
                  for (std::size_t l = 0; l < 3; ++l) {
                    in.push_back(rand_tensor(r, tg.heatmap[l].shape(), -3, 1));
                    Tensor<double> sz = tg.size[l];
                    for (auto& s : sz.values()) s += (uniform(r) < 0.5 ? -1 : 1) * uniform(r, 0.05, 0.5);
                    in.push_back(sz);
                  }
                  return GradInstance{[tg](const V& v) {
                                        Stage1Prediction<double> p;
                                        for (std::size_t l = 0; l < 3; ++l) p[l] = {v[2 * l], v[2 * l + 1]};
                                        return stage1_loss(p, tg);
                                      },
                                      in};
                }});
  cs.push_back({"stage2_loss", [](Rng& r) {
                  const std::size_t n = pick(r, 1, 5);
                  std::vector<Stage2Sample> samples(n);
                  std::vector<std::size_t> order(n);
                  for (std::size_t i = 0; i < n; ++i) {
                    order[i] = n - 1 - i;
                    samples[i].positive = uniform(r) < 0.5;
                    for (auto& t : samples[i].target) t = uniform(r, -1, 1);
                  }
                  Tensor<double> deltas({n, 4});
                  for (std::size_t k = 0; k < n; ++k)
                    for (std::size_t j = 0; j < 4; ++j)
                      deltas[k * 4 + j] = samples[order[k]].target[j] + (uniform(r) < 0.5 ? -1 : 1) * uniform(r, 0.05, 0.8);
                  return GradInstance{[=](const V& v) { return stage2_loss(HeadOutput<double>{v[0], v[1]}, samples, order, 1.0); },
                                      {rand_tensor(r, {n, 1}, -3, 3), deltas}};
                }});
  return cs;
}

struct GradSuiteResult {
  std::string name;
  std::size_t trials = 0;
  double worst = 0.0;
  bool passed = false;
  std::string error;  // non-finite or other failure
};

/// Runs `trials` random instances of every case, or only the one named `filter`.
inline std::vector<GradSuiteResult> run_gradient_suite(const std::string& filter = "", std::size_t trials = 20,
                                                       std::uint64_t seed = 0, GradCheckOptions opt = {},
                                                       double tolerance = 1e-4) {
  std::vector<GradSuiteResult> out;
  const auto cases = gradient_cases();
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    const GradCase& c = cases[ci];
    if (!filter.empty() && c.name != filter) continue;
    GradSuiteResult res{c.name, trials, 0.0, true, {}};
    Rng rng(mix_seed(seed, ci));
    for (std::size_t t = 0; t < trials; ++t) {
      try {
        GradInstance inst = c.make(rng);
        res.worst = std::max(res.worst, grad_check(inst.fn, inst.inputs, opt).max_rel_error);
      } catch (const std::exception& e) {
        res.passed = false;
        res.error = e.what();
        break;
      }
    }
    res.passed = res.passed && res.worst < tolerance;
    out.push_back(res);
  }
  return out;
}

}  // namespace orefsdet
