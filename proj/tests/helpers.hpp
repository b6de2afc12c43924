#pragma once

#include <gtest/gtest.h>

#include "orefsdet/orefsdet.hpp"

namespace testing_helpers {

using orefsdet::Rng;
using orefsdet::Shape;
using TD = orefsdet::Tensor<double>;
using VD = orefsdet::Var<double>;

inline TD rand_t(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  TD t(std::move(s));
  for (auto& v : t.values()) v = orefsdet::uniform(rng, lo, hi);
  return t;
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + orefsdet::uniform_index(rng, hi - lo + 1); }

inline void expect_close(const TD& a, const TD& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  EXPECT_LE(orefsdet::max_abs_diff(a, b), tol);
}

inline TD identity(std::size_t n) {
  TD t({n, n});
  for (std::size_t i = 0; i < n; ++i) t[i * n + i] = 1.0;
  return t;
}

inline orefsdet::Box rand_box(Rng& rng, double W, double H, double min_side = 1.0) {
  const double w = orefsdet::uniform(rng, min_side, W / 2), h = orefsdet::uniform(rng, min_side, H / 2);
  const double x = orefsdet::uniform(rng, 0, W - w), y = orefsdet::uniform(rng, 0, H - h);
  return {x, y, x + w, y + h};
}

}  // namespace testing_helpers
