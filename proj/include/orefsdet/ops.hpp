#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "orefsdet/autograd.hpp"
#include "orefsdet/box.hpp"
#include "orefsdet/tensor.hpp"

namespace orefsdet {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

/// N, C, H, W view of a rank-3 (C,H,W) or rank-4 (N,C,H,W) shape.
struct Nchw {
  std::size_t n, c, h, w;
  bool batched;
};

inline Nchw nchw(const Shape& s, const char* op) {
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
  throw ShapeError(std::string(op) + ": expected CxHxW or NxCxHxW, got " + shape_str(s));
}

inline Shape make_nchw(const Nchw& d, std::size_t c, std::size_t h, std::size_t w) {
  return d.batched ? Shape{d.n, c, h, w} : Shape{c, h, w};
}

template <typename T>
T softplus(T x) {
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Var<T> scalar_result(T value, std::initializer_list<Var<T>> inputs, auto&& backward) {
  return make_result(Tensor<T>({1}, {value}), inputs, std::forward<decltype(backward)>(backward));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  out += b.value();
  return make_result(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    a.accumulate_grad(g);
    b.accumulate_grad(g);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("sub: shape mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return make_result(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    a.accumulate_grad(g);
    if (b.requires_grad()) {
      Tensor<T> ng = g;
      for (auto& v : ng.values()) v = -v;
      b.accumulate_grad(ng);
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul: shape mismatch");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return make_result(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    if (a.requires_grad()) {
      Tensor<T> ga = g;
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= b.value()[i];
      a.accumulate_grad(ga);
    }
    if (b.requires_grad()) {
      Tensor<T> gb = g;
      for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] *= a.value()[i];
      b.accumulate_grad(gb);
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  return make_result(std::move(out), {a}, [a, s](const Tensor<T>& g) {
    Tensor<T> ga = g;
    for (auto& v : ga.values()) v *= s;
    a.accumulate_grad(ga);
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v > T(0) ? v : T(0);
  return make_result(std::move(out), {a}, [a](const Tensor<T>& g) {
    Tensor<T> ga = g;
    for (std::size_t i = 0; i < ga.numel(); ++i)
      if (!(a.value()[i] > T(0))) ga[i] = T(0);
    a.accumulate_grad(ga);
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = detail::sigmoid(v);
  Tensor<T> y = out;
  return make_result(std::move(out), {a}, [a, y](const Tensor<T>& g) {
    Tensor<T> ga = g;
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= y[i] * (T(1) - y[i]);
    a.accumulate_grad(ga);
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.value().values()) s += v;
  return detail::scalar_result(s, {a}, [a](const Tensor<T>& g) { a.accumulate_grad(Tensor<T>(a.shape(), g[0])); });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape s) {
  Tensor<T> out = a.value().reshaped(std::move(s));
  return make_result(std::move(out), {a}, [a](const Tensor<T>& g) { a.accumulate_grad(g.reshaped(a.shape())); });
}

/// Generic axis permutation: out.shape[i] = in.shape[axes[i]].
template <typename T>
Var<T> permute(const Var<T>& a, const std::vector<std::size_t>& axes) {
  const Shape& in = a.shape();
  const std::size_t r = in.size();
  if (axes.size() != r) throw ShapeError("permute: axes rank mismatch");
  std::vector<char> used(r, 0);
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (axes[i] >= r || used[axes[i]]) throw ShapeError("permute: invalid axes");
    used[axes[i]] = 1;
    out_shape[i] = in[axes[i]];
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  // Strides of the input, viewed in output-axis order.
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) src_stride[i] = in_stride[axes[i]];
  std::vector<std::size_t> src_index(a.numel());
  {
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t o = 0; o < src_index.size(); ++o) {
      std::size_t s = 0;
      for (std::size_t k = 0; k < r; ++k) s += idx[k] * src_stride[k];
      src_index[o] = s;
      for (std::size_t k = r; k-- > 0;) {
        if (++idx[k] < out_shape[k]) break;
        idx[k] = 0;
      }
    }
  }
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < out.numel(); ++o) out[o] = a.value()[src_index[o]];
  return make_result(std::move(out), {a}, [a, src_index = std::move(src_index)](const Tensor<T>& g) {
    Tensor<T> ga(a.shape());
    for (std::size_t o = 0; o < g.numel(); ++o) ga[src_index[o]] += g[o];
    a.accumulate_grad(ga);
  });
}

namespace detail {
inline void outer_inner(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& len, std::size_t& inner) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  len = s[axis];
}
}  // namespace detail

/// Concatenation along `axis`; all other extents must agree.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw ShapeError("concat: axis out of range");
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != out_shape[i]) throw ShapeError("concat: extent mismatch on axis " + std::to_string(i));
    out_shape[axis] += s[axis];
  }
  std::size_t outer, len, inner;
  detail::outer_inner(out_shape, axis, outer, len, inner);
  Tensor<T> out(out_shape);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t plen = p.shape()[axis];
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.value().data() + o * plen * inner, plen * inner, out.data() + (o * len + offset) * inner);
    offset += plen;
  }
  return make_result(std::move(out), parts, [parts, axis, outer, len, inner](const Tensor<T>& g) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t plen = p.shape()[axis];
      if (p.requires_grad()) {
        Tensor<T> gp(p.shape());
        for (std::size_t o = 0; o < outer; ++o)
          std::copy_n(g.data() + (o * len + off) * inner, plen * inner, gp.data() + o * plen * inner);
        p.accumulate_grad(gp);
      }
      off += plen;
    }
  });
}

/// Sub-range [start, start+count) along `axis`.
template <typename T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t start, std::size_t count) {
  std::size_t outer, len, inner;
  detail::outer_inner(a.shape(), axis, outer, len, inner);
  if (start + count > len || count == 0) throw ShapeError("slice: range out of bounds");
  Shape s = a.shape();
  s[axis] = count;
  Tensor<T> out(s);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(a.value().data() + (o * len + start) * inner, count * inner, out.data() + o * count * inner);
  return make_result(std::move(out), {a}, [a, outer, len, inner, start, count](const Tensor<T>& g) {
    Tensor<T> ga(a.shape());
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(g.data() + o * count * inner, count * inner, ga.data() + (o * len + start) * inner);
    a.accumulate_grad(ga);
  });
}

/// Numerically stable softmax along `axis` (max-subtracted).
template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  std::size_t outer, len, inner;
  detail::outer_inner(x.shape(), axis, outer, len, inner);
  Tensor<T> y(x.shape());
  const T* xs = x.value().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < len; ++k) m = std::max(m, xs[base + k * inner]);
      T s = 0;
      for (std::size_t k = 0; k < len; ++k) s += (y[base + k * inner] = std::exp(xs[base + k * inner] - m));
      for (std::size_t k = 0; k < len; ++k) y[base + k * inner] /= s;
    }
  Tensor<T> yc = y;
  return make_result(std::move(y), {x}, [x, yc, outer, len, inner](const Tensor<T>& g) {
    Tensor<T> gx(x.shape());
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        T dot = 0;
        for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * yc[base + k * inner];
        for (std::size_t k = 0; k < len; ++k)
          gx[base + k * inner] = yc[base + k * inner] * (g[base + k * inner] - dot);
      }
    x.accumulate_grad(gx);
  });
}

/// x[..., In] * W[In, Out] + b[Out].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const std::optional<Var<T>>& b = std::nullopt) {
  if (w.shape().size() != 2) throw ShapeError("linear: weight must be In x Out");
  const std::size_t in = w.dim(0), outd = w.dim(1);
  if (x.shape().empty() || x.shape().back() != in)
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  if (b && (b->shape().size() != 1 || b->dim(0) != outd)) throw ShapeError("linear: bias must have Out entries");
  const std::size_t rows = x.numel() / in;
  Shape os = x.shape();
  os.back() = outd;
  Tensor<T> out(os);
  detail::MatMap<T> Y(out.data(), rows, outd);
  Y.noalias() = detail::ConstMatMap<T>(x.value().data(), rows, in) * detail::ConstMatMap<T>(w.value().data(), in, outd);
  if (b)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < outd; ++o) Y(r, o) += b->value()[o];
  count_macs(static_cast<std::int64_t>(rows * in * outd));
  std::vector<Var<T>> ins{x, w};
  if (b) ins.push_back(*b);
  return make_result(std::move(out), ins, [x, w, b, rows, in, outd](const Tensor<T>& g) {
    detail::ConstMatMap<T> G(g.data(), rows, outd);
    if (x.requires_grad()) {
      Tensor<T> gx(x.shape());
      detail::MatMap<T>(gx.data(), rows, in).noalias() =
          G * detail::ConstMatMap<T>(w.value().data(), in, outd).transpose();
      x.accumulate_grad(gx);
    }
    if (w.requires_grad()) {
      Tensor<T> gw(w.shape());
      detail::MatMap<T>(gw.data(), in, outd).noalias() =
          detail::ConstMatMap<T>(x.value().data(), rows, in).transpose() * G;
      w.accumulate_grad(gw);
    }
    if (b && b->requires_grad()) {
      Tensor<T> gb(b->shape());
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < outd; ++o) gb[o] += G(r, o);
      b->accumulate_grad(gb);
    }
  });
}

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

/// Dense 2-D convolution (cross-correlation) over CxHxW or NxCxHxW input with
/// an O x C x kh x kw kernel, zero padding. im2col + GEMM.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const std::optional<Var<T>>& b = std::nullopt,
              Conv2dOptions opt = {}) {
  const auto d = detail::nchw(x.shape(), "conv2d");
  if (w.shape().size() != 4 || w.dim(1) != d.c)
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  if (opt.stride == 0) throw ShapeError("conv2d: stride must be positive");
  const std::size_t oc = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (b && (b->shape().size() != 1 || b->dim(0) != oc)) throw ShapeError("conv2d: bias must have O entries");
  if (d.h + 2 * opt.pad < kh || d.w + 2 * opt.pad < kw) throw ShapeError("conv2d: kernel larger than padded input");
  const std::size_t oh = (d.h + 2 * opt.pad - kh) / opt.stride + 1;
  const std::size_t ow = (d.w + 2 * opt.pad - kw) / opt.stride + 1;
  const std::size_t K = d.c * kh * kw, P = oh * ow, NP = d.n * P;
  const bool pointwise = kh == 1 && kw == 1 && opt.stride == 1 && opt.pad == 0 && d.n == 1;

  Tensor<T> col;
  if (!pointwise) {
    col = Tensor<T>({K, NP});
    const T* xs = x.value().data();
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(opt.pad);
    const std::ptrdiff_t stride = static_cast<std::ptrdiff_t>(opt.stride);
    for (std::size_t c = 0; c < d.c; ++c)
      for (std::size_t i = 0; i < kh; ++i)
        for (std::size_t j = 0; j < kw; ++j) {
          T* row = col.data() + ((c * kh + i) * kw + j) * NP;
          for (std::size_t n = 0; n < d.n; ++n) {
            const T* plane = xs + (n * d.c + c) * d.h * d.w;
            for (std::size_t y = 0; y < oh; ++y) {
              T* dst = row + n * P + y * ow;
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y) * stride - pad + static_cast<std::ptrdiff_t>(i);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) {
                std::fill_n(dst, ow, T(0));
                continue;
              }
              const T* src = plane + iy * d.w;
              for (std::size_t xo = 0; xo < ow; ++xo) {
                const std::ptrdiff_t ix =
                    static_cast<std::ptrdiff_t>(xo) * stride - pad + static_cast<std::ptrdiff_t>(j);
                dst[xo] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) ? T(0) : src[ix];
              }
            }
          }
        }
  }
  const T* colp = pointwise ? x.value().data() : col.data();
  detail::RowMat<T> Y = detail::ConstMatMap<T>(w.value().data(), oc, K) * detail::ConstMatMap<T>(colp, K, NP);
  count_macs(static_cast<std::int64_t>(oc * K * NP));

  Tensor<T> out(detail::make_nchw(d, oc, oh, ow));
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t o = 0; o < oc; ++o) {
      const T bias = b ? b->value()[o] : T(0);
      T* dst = out.data() + (n * oc + o) * P;
      const T* src = Y.data() + o * NP + n * P;
      for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + bias;
    }

  std::vector<Var<T>> ins{x, w};
  if (b) ins.push_back(*b);
  return make_result(std::move(out), ins, [=, col = std::move(col)](const Tensor<T>& g) {
    detail::RowMat<T> G(oc, NP);
    for (std::size_t n = 0; n < d.n; ++n)
      for (std::size_t o = 0; o < oc; ++o) std::copy_n(g.data() + (n * oc + o) * P, P, G.data() + o * NP + n * P);
    const T* colb = pointwise ? x.value().data() : col.data();
    if (w.requires_grad()) {
      Tensor<T> gw(w.shape());
      detail::MatMap<T>(gw.data(), oc, K).noalias() = G * detail::ConstMatMap<T>(colb, K, NP).transpose();
      w.accumulate_grad(gw);
    }
    if (b && b->requires_grad()) {
      Tensor<T> gb(b->shape());
      for (std::size_t o = 0; o < oc; ++o) gb[o] = G.row(o).sum();
      b->accumulate_grad(gb);
    }
    if (x.requires_grad()) {
      detail::RowMat<T> dcol = detail::ConstMatMap<T>(w.value().data(), oc, K).transpose() * G;
      if (pointwise) {
        x.accumulate_grad(Tensor<T>(x.shape(), std::span<const T>(dcol.data(), dcol.size())));
        return;
      }
      Tensor<T> gx(x.shape());
      const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(opt.pad);
      const std::ptrdiff_t stride = static_cast<std::ptrdiff_t>(opt.stride);
      for (std::size_t c = 0; c < d.c; ++c)
        for (std::size_t i = 0; i < kh; ++i)
          for (std::size_t j = 0; j < kw; ++j) {
            const T* row = dcol.data() + ((c * kh + i) * kw + j) * NP;
            for (std::size_t n = 0; n < d.n; ++n) {
              T* plane = gx.data() + (n * d.c + c) * d.h * d.w;
              for (std::size_t y = 0; y < oh; ++y) {
                const std::ptrdiff_t iy =
                    static_cast<std::ptrdiff_t>(y) * stride - pad + static_cast<std::ptrdiff_t>(i);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
                const T* src = row + n * P + y * ow;
                T* dst = plane + iy * d.w;
                for (std::size_t xo = 0; xo < ow; ++xo) {
                  const std::ptrdiff_t ix =
                      static_cast<std::ptrdiff_t>(xo) * stride - pad + static_cast<std::ptrdiff_t>(j);
                  if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(d.w)) dst[ix] += src[xo];
                }
              }
            }
          }
      x.accumulate_grad(gx);
    }
  });
}

/// Depthwise cross-correlation with same (zero) padding: each query channel is
/// correlated only with its own kernel slice. Kernel extents must be odd.
template <typename T>
Var<T> depthwise_xcorr(const Var<T>& query, const Var<T>& kernel) {
  if (query.shape().size() != 3 || kernel.shape().size() != 3)
    throw ShapeError("depthwise_xcorr: expected CxHxW query and CxPhxPw kernel");
  const std::size_t C = query.dim(0), H = query.dim(1), W = query.dim(2);
  const std::size_t kh = kernel.dim(1), kw = kernel.dim(2);
  if (kernel.dim(0) != C)
    throw ShapeError("depthwise_xcorr: channel mismatch " + std::to_string(kernel.dim(0)) + " vs " + std::to_string(C));
  if (kh % 2 == 0 || kw % 2 == 0)
    throw ShapeError("depthwise_xcorr: kernel extents must be odd, got " + shape_str(kernel.shape()));
  const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2), pw = static_cast<std::ptrdiff_t>(kw / 2);
  const std::ptrdiff_t Hs = static_cast<std::ptrdiff_t>(H), Ws = static_cast<std::ptrdiff_t>(W);
  Tensor<T> out(query.shape());
  const T* q = query.value().data();
  const T* k = kernel.value().data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t m = 0; m < kh; ++m)
      for (std::size_t n = 0; n < kw; ++n) {
        const T kv = k[(c * kh + m) * kw + n];
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(m) - ph, dx = static_cast<std::ptrdiff_t>(n) - pw;
        for (std::ptrdiff_t h = std::max<std::ptrdiff_t>(0, -dy); h < std::min(Hs, Hs - dy); ++h) {
          const T* src = q + (c * H + static_cast<std::size_t>(h + dy)) * W;
          T* dst = out.data() + (c * H + static_cast<std::size_t>(h)) * W;
          for (std::ptrdiff_t w = std::max<std::ptrdiff_t>(0, -dx); w < std::min(Ws, Ws - dx); ++w)
            dst[w] += kv * src[w + dx];
        }
      }
  count_macs(static_cast<std::int64_t>(C * kh * kw * H * W));
  return make_result(std::move(out), {query, kernel}, [=](const Tensor<T>& g) {
    Tensor<T> gq(query.shape()), gk(kernel.shape());
    const T* qv = query.value().data();
    const T* kv = kernel.value().data();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t m = 0; m < kh; ++m)
        for (std::size_t n = 0; n < kw; ++n) {
          const std::size_t ki = (c * kh + m) * kw + n;
          const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(m) - ph, dx = static_cast<std::ptrdiff_t>(n) - pw;
          T acc = 0;
          for (std::ptrdiff_t h = std::max<std::ptrdiff_t>(0, -dy); h < std::min(Hs, Hs - dy); ++h) {
            const std::size_t src_row = (c * H + static_cast<std::size_t>(h + dy)) * W;
            const std::size_t g_row = (c * H + static_cast<std::size_t>(h)) * W;
            for (std::ptrdiff_t w = std::max<std::ptrdiff_t>(0, -dx); w < std::min(Ws, Ws - dx); ++w) {
              acc += qv[src_row + static_cast<std::size_t>(w + dx)] * g[g_row + static_cast<std::size_t>(w)];
              gq[src_row + static_cast<std::size_t>(w + dx)] += kv[ki] * g[g_row + static_cast<std::size_t>(w)];
            }
          }
          gk[ki] = acc;
        }
    query.accumulate_grad(gq);
    kernel.accumulate_grad(gk);
  });
}

namespace detail {
inline std::size_t pool_start(std::size_t i, std::size_t in, std::size_t out) { return (i * in) / out; }
inline std::size_t pool_end(std::size_t i, std::size_t in, std::size_t out) { return ((i + 1) * in + out - 1) / out; }
}  // namespace detail

/// Adaptive average pooling of CxHxW to C x out_h x out_w with the standard
/// [floor(i*H/o), ceil((i+1)*H/o)) window partition.
template <typename T>
Var<T> adaptive_avg_pool(const Var<T>& x, std::size_t out_h, std::size_t out_w) {
  if (x.shape().size() != 3) throw ShapeError("adaptive_avg_pool: expected CxHxW");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (out_h == 0 || out_w == 0 || out_h > H || out_w > W)
    throw ShapeError("adaptive_avg_pool: output " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                     " exceeds input " + shape_str(x.shape()));
  Tensor<T> out({C, out_h, out_w});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < out_h; ++i)
      for (std::size_t j = 0; j < out_w; ++j) {
        const std::size_t h0 = detail::pool_start(i, H, out_h), h1 = detail::pool_end(i, H, out_h);
        const std::size_t w0 = detail::pool_start(j, W, out_w), w1 = detail::pool_end(j, W, out_w);
        T s = 0;
        for (std::size_t h = h0; h < h1; ++h)
          for (std::size_t w = w0; w < w1; ++w) s += x.value().at(c, h, w);
        out.at(c, i, j) = s / static_cast<T>((h1 - h0) * (w1 - w0));
      }
  return make_result(std::move(out), {x}, [x, C, H, W, out_h, out_w](const Tensor<T>& g) {
    Tensor<T> gx(x.shape());
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < out_h; ++i)
        for (std::size_t j = 0; j < out_w; ++j) {
          const std::size_t h0 = detail::pool_start(i, H, out_h), h1 = detail::pool_end(i, H, out_h);
          const std::size_t w0 = detail::pool_start(j, W, out_w), w1 = detail::pool_end(j, W, out_w);
          const T v = g.at(c, i, j) / static_cast<T>((h1 - h0) * (w1 - w0));
          for (std::size_t h = h0; h < h1; ++h)
            for (std::size_t w = w0; w < w1; ++w) gx.at(c, h, w) += v;
        }
    x.accumulate_grad(gx);
  });
}

/// Max pooling with -inf padding; gradient routes to the first maximum.
template <typename T>
Var<T> max_pool2d(const Var<T>& x, std::size_t k, std::size_t stride, std::size_t pad) {
  if (x.shape().size() != 3) throw ShapeError("max_pool2d: expected CxHxW");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (k == 0 || stride == 0 || H + 2 * pad < k || W + 2 * pad < k) throw ShapeError("max_pool2d: bad window");
  const std::size_t oh = (H + 2 * pad - k) / stride + 1, ow = (W + 2 * pad - k) / stride + 1;
  Tensor<T> out({C, oh, ow});
  std::vector<std::size_t> arg(out.numel());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t bi = std::numeric_limits<std::size_t>::max();
        for (std::size_t a = 0; a < k; ++a)
          for (std::size_t bb = 0; bb < k; ++bb) {
            const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(i * stride + a) - static_cast<std::ptrdiff_t>(pad);
            const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(j * stride + bb) - static_cast<std::ptrdiff_t>(pad);
            if (h < 0 || w < 0 || h >= static_cast<std::ptrdiff_t>(H) || w >= static_cast<std::ptrdiff_t>(W)) continue;
            const std::size_t idx = (c * H + static_cast<std::size_t>(h)) * W + static_cast<std::size_t>(w);
            if (x.value()[idx] > best) {
              best = x.value()[idx];
              bi = idx;
            }
          }
        out.at(c, i, j) = best;
        arg[(c * oh + i) * ow + j] = bi;
      }
  return make_result(std::move(out), {x}, [x, arg = std::move(arg)](const Tensor<T>& g) {
    Tensor<T> gx(x.shape());
    for (std::size_t o = 0; o < arg.size(); ++o)
      if (arg[o] != std::numeric_limits<std::size_t>::max()) gx[arg[o]] += g[o];
    x.accumulate_grad(gx);
  });
}

namespace detail {
/// Half-pixel (align_corners = false) source taps for one output coordinate.
struct LinearTap {
  std::size_t i0, i1;
  double w0, w1;
};

inline std::vector<LinearTap> resize_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double l = src - static_cast<double>(i0);
    taps[o] = {i0, i1, 1.0 - l, l};
  }
  return taps;
}
}  // namespace detail

/// Bilinear resize (half-pixel centres, edge clamped) of CxHxW or NxCxHxW.
template <typename T>
Var<T> bilinear_resize(const Var<T>& x, std::size_t out_h, std::size_t out_w) {
  const auto d = detail::nchw(x.shape(), "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: empty output");
  const auto ty = detail::resize_taps(d.h, out_h);
  const auto tx = detail::resize_taps(d.w, out_w);
  const std::size_t planes = d.n * d.c;
  Tensor<T> out(detail::make_nchw(d, d.c, out_h, out_w));
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.value().data() + p * d.h * d.w;
    T* dst = out.data() + p * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const auto& a = ty[i];
      for (std::size_t j = 0; j < out_w; ++j) {
        const auto& b = tx[j];
        dst[i * out_w + j] = static_cast<T>(a.w0 * (b.w0 * src[a.i0 * d.w + b.i0] + b.w1 * src[a.i0 * d.w + b.i1]) +
                                            a.w1 * (b.w0 * src[a.i1 * d.w + b.i0] + b.w1 * src[a.i1 * d.w + b.i1]));
      }
    }
  }
  return make_result(std::move(out), {x}, [x, d, ty, tx, planes, out_h, out_w](const Tensor<T>& g) {
    Tensor<T> gx(x.shape());
    for (std::size_t p = 0; p < planes; ++p) {
      T* dst = gx.data() + p * d.h * d.w;
      const T* gs = g.data() + p * out_h * out_w;
      for (std::size_t i = 0; i < out_h; ++i)
        for (std::size_t j = 0; j < out_w; ++j) {
          const auto& a = ty[i];
          const auto& b = tx[j];
          const double v = gs[i * out_w + j];
          dst[a.i0 * d.w + b.i0] += static_cast<T>(v * a.w0 * b.w0);
          dst[a.i0 * d.w + b.i1] += static_cast<T>(v * a.w0 * b.w1);
          dst[a.i1 * d.w + b.i0] += static_cast<T>(v * a.w1 * b.w0);
          dst[a.i1 * d.w + b.i1] += static_cast<T>(v * a.w1 * b.w1);
        }
    }
    x.accumulate_grad(gx);
  });
}

/// out[c,h,w] = x[c,h,w] * s[c]  (s has C entries).
template <typename T>
Var<T> channel_mul(const Var<T>& x, const Var<T>& s) {
  if (x.shape().size() != 3 || s.numel() != x.dim(0)) throw ShapeError("channel_mul: need CxHxW and C weights");
  const std::size_t C = x.dim(0), HW = x.dim(1) * x.dim(2);
  Tensor<T> out = x.value();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < HW; ++i) out[c * HW + i] *= s.value()[c];
  return make_result(std::move(out), {x, s}, [x, s, C, HW](const Tensor<T>& g) {
    if (x.requires_grad()) {
      Tensor<T> gx = g;
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < HW; ++i) gx[c * HW + i] *= s.value()[c];
      x.accumulate_grad(gx);
    }
    if (s.requires_grad()) {
      Tensor<T> gs(s.shape());
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < HW; ++i) gs[c] += g[c * HW + i] * x.value()[c * HW + i];
      s.accumulate_grad(gs);
    }
  });
}

/// Group normalization over (C/G channels x H x W) per sample, then a
/// per-channel affine. Accepts C x H x W or N x C x H x W.
template <typename T>
Var<T> group_norm(const Var<T>& x, std::size_t groups, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const auto d = detail::nchw(x.shape(), "group_norm");
  if (groups == 0 || d.c % groups) throw ShapeError("group_norm: channels not divisible by groups");
  if (gamma.numel() != d.c || beta.numel() != d.c) throw ShapeError("group_norm: affine size mismatch");
  const std::size_t HW = d.h * d.w, cg = d.c / groups, m = cg * HW;
  Tensor<T> xhat(x.shape()), out(x.shape());
  std::vector<T> inv_std(d.n * groups);
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t g = 0; g < groups; ++g) {
      const T* src = x.value().data() + (n * d.c + g * cg) * HW;
      double mu = 0, var = 0;
      for (std::size_t i = 0; i < m; ++i) mu += src[i];
      mu /= static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i) var += (src[i] - mu) * (src[i] - mu);
      var /= static_cast<double>(m);
      const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      inv_std[n * groups + g] = is;
      T* xh = xhat.data() + (n * d.c + g * cg) * HW;
      T* o = out.data() + (n * d.c + g * cg) * HW;
      for (std::size_t i = 0; i < m; ++i) {
        xh[i] = static_cast<T>((src[i] - mu) * is);
        const std::size_t c = g * cg + i / HW;
        o[i] = xh[i] * gamma.value()[c] + beta.value()[c];
      }
    }
  return make_result(std::move(out), {x, gamma, beta},
                     [x, gamma, beta, xhat, inv_std, d, groups, HW, cg, m](const Tensor<T>& gout) {
                       if (gamma.requires_grad() || beta.requires_grad()) {
                         Tensor<T> gg(gamma.shape()), gb(beta.shape());
                         for (std::size_t n = 0; n < d.n; ++n)
                           for (std::size_t c = 0; c < d.c; ++c)
                             for (std::size_t i = 0; i < HW; ++i) {
                               const std::size_t k = (n * d.c + c) * HW + i;
                               gg[c] += gout[k] * xhat[k];
                               gb[c] += gout[k];
                             }
                         if (gamma.requires_grad()) gamma.accumulate_grad(gg);
                         if (beta.requires_grad()) beta.accumulate_grad(gb);
                       }
                       if (!x.requires_grad()) return;
                       Tensor<T> gx(x.shape());
                       for (std::size_t n = 0; n < d.n; ++n)
                         for (std::size_t g = 0; g < groups; ++g) {
                           const std::size_t base = (n * d.c + g * cg) * HW;
                           double s1 = 0, s2 = 0;
                           for (std::size_t i = 0; i < m; ++i) {
                             const double dy = gout[base + i] * gamma.value()[g * cg + i / HW];
                             s1 += dy;
                             s2 += dy * xhat[base + i];
                           }
                           s1 /= static_cast<double>(m);
                           s2 /= static_cast<double>(m);
                           const double is = inv_std[n * groups + g];
                           for (std::size_t i = 0; i < m; ++i) {
                             const double dy = gout[base + i] * gamma.value()[g * cg + i / HW];
                             gx[base + i] = static_cast<T>(is * (dy - s1 - xhat[base + i] * s2));
                           }
                         }
                       x.accumulate_grad(gx);
                     });
}

/// Broadcasts C values (any shape with C entries) to C x H x W.
template <typename T>
Var<T> broadcast_hw(const Var<T>& s, std::size_t H, std::size_t W) {
  const std::size_t C = s.numel();
  Tensor<T> out({C, H, W});
  for (std::size_t c = 0; c < C; ++c) std::fill_n(out.data() + c * H * W, H * W, s.value()[c]);
  return make_result(std::move(out), {s}, [s, C, H, W](const Tensor<T>& g) {
    Tensor<T> gs(s.shape());
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H * W; ++i) gs[c] += g[c * H * W + i];
    s.accumulate_grad(gs);
  });
}

/// Stacks n copies of x along a new leading axis.
template <typename T>
Var<T> repeat_batch(const Var<T>& x, std::size_t n) {
  Shape s = x.shape();
  s.insert(s.begin(), n);
  Tensor<T> out(s);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(x.value().data(), x.numel(), out.data() + i * x.numel());
  return make_result(std::move(out), {x}, [x, n](const Tensor<T>& g) {
    Tensor<T> gx(x.shape());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < gx.numel(); ++k) gx[k] += g[i * gx.numel() + k];
    x.accumulate_grad(gx);
  });
}

// ---------------------------------------------------------------------------
// RoI align
// ---------------------------------------------------------------------------

namespace detail {
struct BilinearSample {
  std::size_t i00, i01, i10, i11;
  double w00, w01, w10, w11;
  bool valid;
};

/// Bilinear tap with the usual RoI-align boundary rule (outside [-1, H] is 0).
inline BilinearSample bilinear_sample(double y, double x, std::size_t H, std::size_t W) {
  if (y < -1.0 || y > static_cast<double>(H) || x < -1.0 || x > static_cast<double>(W)) return {0, 0, 0, 0, 0, 0, 0, 0, false};
  y = std::max(y, 0.0);
  x = std::max(x, 0.0);
  std::size_t y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x), y1, x1;
  if (y0 >= H - 1) {
    y0 = y1 = H - 1;
    y = static_cast<double>(y0);
  } else {
    y1 = y0 + 1;
  }
  if (x0 >= W - 1) {
    x0 = x1 = W - 1;
    x = static_cast<double>(x0);
  } else {
    x1 = x0 + 1;
  }
  const double ly = y - static_cast<double>(y0), lx = x - static_cast<double>(x0);
  const double hy = 1.0 - ly, hx = 1.0 - lx;
  return {y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1, hy * hx, hy * lx, ly * hx, ly * lx, true};
}
}  // namespace detail

/// Bilinear RoI align (half-pixel aligned) of each box on one CxHxW level.
/// `spatial_scale` maps image pixels to feature cells. Output N x C x res x res.
template <typename T>
Var<T> roi_align(const Var<T>& feat, const std::vector<Box>& boxes, double spatial_scale, std::size_t res,
                 std::size_t sampling = 2) {
  if (feat.shape().size() != 3) throw ShapeError("roi_align: expected CxHxW feature");
  if (res == 0 || sampling == 0) throw ShapeError("roi_align: resolution and sampling must be positive");
  for (const auto& b : boxes)
    if (!b.valid()) throw ShapeError("roi_align: degenerate box");
  const std::size_t C = feat.dim(0), H = feat.dim(1), W = feat.dim(2), N = boxes.size();
  const std::size_t S = sampling * sampling, cells = res * res;
  // Precompute taps: [box][cell][sample].
  std::vector<detail::BilinearSample> taps(N * cells * S);
  for (std::size_t n = 0; n < N; ++n) {
    const Box& b = boxes[n];
    const double x0 = b.x1 * spatial_scale - 0.5, y0 = b.y1 * spatial_scale - 0.5;
    const double bw = b.width() * spatial_scale / static_cast<double>(res);
    const double bh = b.height() * spatial_scale / static_cast<double>(res);
    for (std::size_t i = 0; i < res; ++i)
      for (std::size_t j = 0; j < res; ++j)
        for (std::size_t sy = 0; sy < sampling; ++sy)
          for (std::size_t sx = 0; sx < sampling; ++sx) {
            const double y = y0 + (static_cast<double>(i) + (static_cast<double>(sy) + 0.5) / sampling) * bh;
            const double x = x0 + (static_cast<double>(j) + (static_cast<double>(sx) + 0.5) / sampling) * bw;
            taps[((n * cells) + i * res + j) * S + sy * sampling + sx] = detail::bilinear_sample(y, x, H, W);
          }
  }
  Tensor<T> out({N, C, res, res});
  const double inv = 1.0 / static_cast<double>(S);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* plane = feat.value().data() + c * H * W;
      for (std::size_t cell = 0; cell < cells; ++cell) {
        double acc = 0;
        for (std::size_t s = 0; s < S; ++s) {
          const auto& t = taps[(n * cells + cell) * S + s];
          if (t.valid) acc += t.w00 * plane[t.i00] + t.w01 * plane[t.i01] + t.w10 * plane[t.i10] + t.w11 * plane[t.i11];
        }
        out[((n * C + c) * cells) + cell] = static_cast<T>(acc * inv);
      }
    }
  return make_result(std::move(out), {feat}, [feat, taps = std::move(taps), N, C, H, W, cells, S, inv](const Tensor<T>& g) {
    Tensor<T> gf(feat.shape());
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        T* plane = gf.data() + c * H * W;
        for (std::size_t cell = 0; cell < cells; ++cell) {
          const double v = g[(n * C + c) * cells + cell] * inv;
          for (std::size_t s = 0; s < S; ++s) {
            const auto& t = taps[(n * cells + cell) * S + s];
            if (!t.valid) continue;
            plane[t.i00] += static_cast<T>(v * t.w00);
            plane[t.i01] += static_cast<T>(v * t.w01);
            plane[t.i10] += static_cast<T>(v * t.w10);
            plane[t.i11] += static_cast<T>(v * t.w11);
          }
        }
      }
    feat.accumulate_grad(gf);
  });
}

// ---------------------------------------------------------------------------
// Losses. Each returns an unnormalized scalar sum; callers normalize.
// ---------------------------------------------------------------------------

/// Penalty-reduced pixelwise focal loss on sigmoid(logits) against a
/// Gaussian-splatted target in [0,1]; cells with target exactly 1 are centres.
template <typename T>
Var<T> focal_loss_sum(const Var<T>& logits, const Tensor<T>& target, T alpha = 2, T beta = 4) {
  if (logits.shape() != target.shape()) throw ShapeError("focal_loss: target shape mismatch");
  T loss = 0;
  Tensor<T> grad(logits.shape());
  for (std::size_t i = 0; i < target.numel(); ++i) {
    const T x = logits.value()[i];
    const T p = detail::sigmoid(x);
    const T log_p = -detail::softplus(-x);
    const T log_1mp = -detail::softplus(x);
    const T y = target[i];
    if (y == T(1)) {
      const T w = std::pow(T(1) - p, alpha);
      loss += -w * log_p;
      grad[i] = w * (alpha * p * log_p - (T(1) - p));
    } else {
      const T neg = std::pow(T(1) - y, beta);
      const T pa = std::pow(p, alpha);
      loss += -neg * pa * log_1mp;
      grad[i] = neg * pa * (p - alpha * (T(1) - p) * log_1mp);
    }
  }
  return detail::scalar_result(loss, {logits}, [logits, grad](const Tensor<T>& g) {
    Tensor<T> gl = grad;
    for (auto& v : gl.values()) v *= g[0];
    logits.accumulate_grad(gl);
  });
}

/// sum(mask * |pred - target|).
template <typename T>
Var<T> masked_l1_sum(const Var<T>& pred, const Tensor<T>& target, const Tensor<T>& mask) {
  if (pred.shape() != target.shape() || pred.shape() != mask.shape()) throw ShapeError("masked_l1: shape mismatch");
  T loss = 0;
  Tensor<T> grad(pred.shape());
  for (std::size_t i = 0; i < target.numel(); ++i) {
    const T d = pred.value()[i] - target[i];
    loss += mask[i] * std::abs(d);
    grad[i] = mask[i] * (d > 0 ? T(1) : (d < 0 ? T(-1) : T(0)));
  }
  return detail::scalar_result(loss, {pred}, [pred, grad](const Tensor<T>& g) {
    Tensor<T> gp = grad;
    for (auto& v : gp.values()) v *= g[0];
    pred.accumulate_grad(gp);
  });
}

/// sum over entries of binary cross-entropy between sigmoid(logits) and targets.
template <typename T>
Var<T> bce_with_logits_sum(const Var<T>& logits, const Tensor<T>& target) {
  if (logits.shape() != target.shape()) throw ShapeError("bce: shape mismatch");
  T loss = 0;
  Tensor<T> grad(logits.shape());
  for (std::size_t i = 0; i < target.numel(); ++i) {
    const T x = logits.value()[i];
    loss += detail::softplus(x) - target[i] * x;
    grad[i] = detail::sigmoid(x) - target[i];
  }
  return detail::scalar_result(loss, {logits}, [logits, grad](const Tensor<T>& g) {
    Tensor<T> gl = grad;
    for (auto& v : gl.values()) v *= g[0];
    logits.accumulate_grad(gl);
  });
}

/// sum(mask * smooth_l1(pred - target)) with transition point beta.
template <typename T>
Var<T> smooth_l1_sum(const Var<T>& pred, const Tensor<T>& target, const Tensor<T>& mask, T beta = 1) {
  if (pred.shape() != target.shape() || pred.shape() != mask.shape()) throw ShapeError("smooth_l1: shape mismatch");
  T loss = 0;
  Tensor<T> grad(pred.shape());
  for (std::size_t i = 0; i < target.numel(); ++i) {
    const T d = pred.value()[i] - target[i];
    const T ad = std::abs(d);
    if (ad < beta) {
      loss += mask[i] * T(0.5) * d * d / beta;
      grad[i] = mask[i] * d / beta;
    } else {
      loss += mask[i] * (ad - T(0.5) * beta);
      grad[i] = mask[i] * (d > 0 ? T(1) : T(-1));
    }
  }
  return detail::scalar_result(loss, {pred}, [pred, grad](const Tensor<T>& g) {
    Tensor<T> gp = grad;
    for (auto& v : gp.values()) v *= g[0];
    pred.accumulate_grad(gp);
  });
}

}  // namespace orefsdet
