#pragma once

#include <string>

#include "orefsdet/backbone.hpp"
#include "orefsdet/layers.hpp"

namespace orefsdet {

/// Support-feature mining parameters. Two branches (height, width) fused by a
/// per-channel softmax over K = 2 branch logits.
template <typename T>
struct SMParams {
  static constexpr std::size_t kBranches = 2;

  Var<T> w_h;  // C x C, height encoder
  Var<T> w_w;  // C x C, width encoder
  Var<T> r1;   // C x C_hat
  Var<T> r2;   // C_hat x (K*C)
  std::size_t segments = 8;

  SMParams() = default;
  SMParams(std::size_t channels, std::size_t segments_, std::size_t reduction, Rng& rng) : segments(segments_) {
    if (segments == 0 || channels % segments != 0) throw ShapeError("SMParams: channels must divide into segments");
    const std::size_t hidden = std::max<std::size_t>(1, channels / reduction);
    w_h = Var<T>(kaiming_uniform<T>({channels, channels}, channels, rng), true);
    w_w = Var<T>(kaiming_uniform<T>({channels, channels}, channels, rng), true);
    r1 = Var<T>(kaiming_uniform<T>({channels, hidden}, channels, rng), true);
    r2 = Var<T>(kaiming_uniform<T>({hidden, kBranches * channels}, hidden, rng), true);
  }

  std::size_t channels() const { return w_h.dim(0); }
  /// Spatial extent the block operates at: C = extent * segments.
  std::size_t extent() const { return channels() / segments; }

  void collect(ParameterList<T>& p, const std::string& prefix) const {
    p.add(prefix + ".height_fc", w_h);
    p.add(prefix + ".width_fc", w_w);
    p.add(prefix + ".reduce", r1);
    p.add(prefix + ".expand", r2);
  }
};

namespace detail {
inline void check_segments(std::size_t C, std::size_t extent, std::size_t segments, const char* what) {
  if (segments == 0 || C != extent * segments)
    throw ShapeError(std::string(what) + ": channel count " + std::to_string(C) + " != " + std::to_string(extent) +
                     " x " + std::to_string(segments) + " segments");
}
}  // namespace detail

/// Height-channel permutation: channel c = s*H + j maps to
/// permuted[s*H + h, j, w] = x[s*H + j, h, w]. Returned in (j, w, s, h) order so
/// that the permuted channel axis (s, h) is last.
template <typename T>
Var<T> permute_height(const Var<T>& x, std::size_t segments) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  detail::check_segments(C, H, segments, "permute_height");
  return permute(reshape(x, {segments, H, H, W}), {1, 3, 0, 2});
}

template <typename T>
Var<T> unpermute_height(const Var<T>& p, std::size_t segments) {
  const std::size_t H = p.dim(0), W = p.dim(1);
  return reshape(permute(p, {2, 0, 3, 1}), {segments * H, H, W});
}

/// Width-channel permutation, returned in (h, j, s, w) order.
template <typename T>
Var<T> permute_width(const Var<T>& x, std::size_t segments) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  detail::check_segments(C, W, segments, "permute_width");
  return permute(reshape(x, {segments, W, H, W}), {2, 1, 0, 3});
}

template <typename T>
Var<T> unpermute_width(const Var<T>& p, std::size_t segments) {
  const std::size_t H = p.dim(0), W = p.dim(1);
  return reshape(permute(p, {2, 1, 0, 3}), {segments * W, H, W});
}

/// Encodes along height: permute, fully connected over the permuted channel
/// axis, inverse permute. Requires C == H * segments.
template <typename T>
Var<T> encode_height(const Var<T>& x, const Var<T>& w_h, std::size_t segments) {
  if (x.shape().size() != 3) throw ShapeError("encode_height: expected CxHxW");
  Var<T> p = permute_height(x, segments);
  const Shape ps = p.shape();
  Var<T> mixed = linear(reshape(p, {ps[0] * ps[1], ps[2] * ps[3]}), w_h);
  return unpermute_height(reshape(mixed, ps), segments);
}

/// Width-direction mirror of encode_height. Requires C == W * segments.
template <typename T>
Var<T> encode_width(const Var<T>& x, const Var<T>& w_w, std::size_t segments) {
  if (x.shape().size() != 3) throw ShapeError("encode_width: expected CxHxW");
  Var<T> p = permute_width(x, segments);
  const Shape ps = p.shape();
  Var<T> mixed = linear(reshape(p, {ps[0] * ps[1], ps[2] * ps[3]}), w_w);
  return unpermute_width(reshape(mixed, ps), segments);
}

/// Branch weights Z (K x C): softmax over K of ReLU(mean_hw(X_h + X_w) R1) R2.
template <typename T>
Var<T> branch_weights(const Var<T>& x_h, const Var<T>& x_w, const Var<T>& r1, const Var<T>& r2) {
  if (x_h.shape() != x_w.shape()) throw ShapeError("fuse: branch shapes differ");
  const std::size_t C = x_h.dim(0);
  if (r1.dim(0) != C || r2.dim(0) != r1.dim(1) || r2.dim(1) != SMParams<T>::kBranches * C)
    throw ShapeError("fuse: R1/R2 shapes " + shape_str(r1.shape()) + "/" + shape_str(r2.shape()) +
                     " incompatible with " + std::to_string(C) + " channels");
  Var<T> g = reshape(adaptive_avg_pool(add(x_h, x_w), 1, 1), {1, C});
  Var<T> z = linear(relu(linear(g, r1)), r2);
  return softmax(reshape(z, {SMParams<T>::kBranches, C}), 0);
}

/// X_hat = X_h * Z[0,:] + X_w * Z[1,:], channel-wise.
template <typename T>
Var<T> fuse(const Var<T>& x_h, const Var<T>& x_w, const Var<T>& r1, const Var<T>& r2) {
  const std::size_t C = x_h.dim(0);
  Var<T> z = branch_weights(x_h, x_w, r1, r2);
  return add(channel_mul(x_h, reshape(slice(z, 0, 0, 1), {C})), channel_mul(x_w, reshape(slice(z, 0, 1, 1), {C})));
}

template <typename T>
Var<T> sm_block(const Var<T>& x, const SMParams<T>& p) {
  return fuse(encode_height(x, p.w_h, p.segments), encode_width(x, p.w_w, p.segments), p.r1, p.r2);
}

/// Pools each support level to the block's calibration extent (C = extent *
/// segments) and mines it. Parameters are shared across levels.
template <typename T>
FeaturePyramid<T> mine_support(const FeaturePyramid<T>& support, const SMParams<T>& p) {
  FeaturePyramid<T> out;
  const std::size_t e = p.extent();
  for (std::size_t i = 0; i < 3; ++i) {
    const Var<T>& lvl = support[i];
    Var<T> x = lvl;
    if (lvl.dim(1) != e || lvl.dim(2) != e)
      x = (lvl.dim(1) >= e && lvl.dim(2) >= e) ? adaptive_avg_pool(lvl, e, e) : bilinear_resize(lvl, e, e);
    out[i] = sm_block(x, p);
  }
  return out;
}

}  // namespace orefsdet
