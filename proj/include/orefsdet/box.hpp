#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace orefsdet {

/// Axis-aligned box in pixel coordinates, (x1, y1) top-left, (x2, y2) bottom-right.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x2 > x1 && y2 > y1; }

  Box clipped(double w, double h) const {
    return {std::clamp(x1, 0.0, w), std::clamp(y1, 0.0, h), std::clamp(x2, 0.0, w), std::clamp(y2, 0.0, h)};
  }
  Box scaled(double s) const { return {x1 * s, y1 * s, x2 * s, y2 * s}; }

  friend bool operator==(const Box&, const Box&) = default;
};

inline double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("iou: degenerate box");
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

struct ScoredBox {
  Box box;
  double score = 0;
};

/// Greedy NMS: descending score, ties by input order; suppresses IoU > thr.
/// Returns indices into `dets` of the survivors in keep order.
inline std::vector<std::size_t> nms_indices(const std::vector<ScoredBox>& dets, double iou_thr = 0.5) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<std::size_t> keep;
  std::vector<char> dead(dets.size(), 0);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (dead[i]) continue;
    keep.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!dead[j] && iou(dets[i].box, dets[j].box) > iou_thr) dead[j] = 1;
    }
  }
  return keep;
}

inline std::vector<ScoredBox> nms(const std::vector<ScoredBox>& dets, double iou_thr = 0.5) {
  std::vector<ScoredBox> out;
  for (std::size_t i : nms_indices(dets, iou_thr)) out.push_back(dets[i]);
  return out;
}

/// Standard (dx, dy, dw, dh) box deltas with per-coordinate weights.
struct BoxCoder {
  std::array<double, 4> weights{10.0, 10.0, 5.0, 5.0};
  double max_log_scale = std::log(1000.0 / 16.0);

  std::array<double, 4> encode(const Box& src, const Box& dst) const {
    return {weights[0] * (dst.cx() - src.cx()) / src.width(), weights[1] * (dst.cy() - src.cy()) / src.height(),
            weights[2] * std::log(dst.width() / src.width()), weights[3] * std::log(dst.height() / src.height())};
  }

  Box decode(const Box& src, const std::array<double, 4>& d) const {
    const double dw = std::min(d[2] / weights[2], max_log_scale);
    const double dh = std::min(d[3] / weights[3], max_log_scale);
    const double cx = src.cx() + d[0] / weights[0] * src.width();
    const double cy = src.cy() + d[1] / weights[1] * src.height();
    const double w = src.width() * std::exp(dw);
    const double h = src.height() * std::exp(dh);
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  }
};

}  // namespace orefsdet
