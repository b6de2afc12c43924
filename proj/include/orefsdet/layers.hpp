#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>

#include "orefsdet/ops.hpp"

namespace orefsdet {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; derives independent stream seeds from (seed, tag).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Uniform in [lo, hi) from the raw 64-bit stream; independent of the
/// standard library's distribution implementations.
inline double uniform(Rng& rng, double lo = 0.0, double hi = 1.0) {
  return lo + (hi - lo) * static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) { return static_cast<std::size_t>(uniform(rng) * n) % n; }

/// Kaiming-uniform (fan-in, ReLU gain) initialization.
template <typename T>
Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.values()) v = static_cast<T>(uniform(rng, -bound, bound));
  return t;
}

template <typename T>
struct Conv2d {
  Var<T> weight;
  Var<T> bias;
  Conv2dOptions opt;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t k, Rng& rng, Conv2dOptions o = {})
      : weight(kaiming_uniform<T>({out, in, k, k}, in * k * k, rng), true), bias(Tensor<T>({out}), true), opt(o) {}

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight, std::optional<Var<T>>(bias), opt); }

  void collect(ParameterList<T>& params, const std::string& prefix) const {
    params.add(prefix + ".weight", weight);
    params.add(prefix + ".bias", bias);
  }
};

/// Group normalization with learned per-channel scale (1) and shift (0).
template <typename T>
struct GroupNorm {
  Var<T> gamma;
  Var<T> beta;
  std::size_t groups = 1;

  GroupNorm() = default;
  GroupNorm(std::size_t channels, std::size_t groups_)
      : gamma(Tensor<T>({channels}, T(1)), true), beta(Tensor<T>({channels}), true), groups(groups_) {}

  Var<T> operator()(const Var<T>& x) const { return group_norm(x, groups, gamma, beta); }

  void collect(ParameterList<T>& params, const std::string& prefix) const {
    params.add(prefix + ".gamma", gamma);
    params.add(prefix + ".beta", beta);
  }
};

/// Fully connected layer with In x Out weight.
template <typename T>
struct Linear {
  Var<T> weight;
  Var<T> bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : weight(kaiming_uniform<T>({in, out}, in, rng), true), bias(Tensor<T>({out}), true) {}

  Var<T> operator()(const Var<T>& x) const { return linear(x, weight, std::optional<Var<T>>(bias)); }

  void collect(ParameterList<T>& params, const std::string& prefix) const {
    params.add(prefix + ".weight", weight);
    params.add(prefix + ".bias", bias);
  }
};

}  // namespace orefsdet
