#pragma once

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <nlohmann/json.hpp>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "orefsdet/box.hpp"

namespace orefsdet {

struct AreaRange {
  double lo = 0;  // exclusive, except the "all" range
  double hi = std::numeric_limits<double>::infinity();
  bool contains(double a) const { return (lo <= 0 ? a >= 0 : a > lo) && a <= hi; }
};

inline constexpr double kSmallArea = 32.0 * 32.0;
inline constexpr double kMediumArea = 96.0 * 96.0;

inline AreaRange area_all() { return {}; }
inline AreaRange area_small() { return {0, kSmallArea}; }
inline AreaRange area_medium() { return {kSmallArea, kMediumArea}; }
inline AreaRange area_large() { return {kMediumArea, std::numeric_limits<double>::infinity()}; }

inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

/// AP at one IoU threshold. Per image, detections are matched greedily in
/// score order to the best-IoU unmatched gt; gts outside the area range are
/// ignored (as are detections matched to them, and unmatched detections
/// outside the range). 101-point interpolated precision. nullopt when no gt
/// falls inside the range.
inline std::optional<double> compute_ap(const std::vector<std::vector<ScoredBox>>& dets,
                                        const std::vector<std::vector<Box>>& gts, double iou_thr,
                                        AreaRange range = area_all()) {
  if (dets.size() != gts.size()) throw std::invalid_argument("compute_ap: per-image lists differ in length");
  struct Entry {
    double score;
    bool tp;
  };
  std::vector<Entry> entries;
  std::size_t npos = 0;
  for (std::size_t img = 0; img < gts.size(); ++img) {
    const auto& g = gts[img];
    std::vector<char> ignore(g.size()), taken(g.size(), 0);
    for (std::size_t j = 0; j < g.size(); ++j) {
      ignore[j] = !range.contains(g[j].area());
      npos += !ignore[j];
    }
    std::vector<std::size_t> order(dets[img].size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[img][a].score > dets[img][b].score; });
    for (std::size_t di : order) {
      const ScoredBox& d = dets[img][di];
      // Prefer non-ignored gts; fall back to ignored ones.
      long match = -1;
      for (int pass = 0; pass < 2 && match < 0; ++pass) {
        double best = iou_thr;
        for (std::size_t j = 0; j < g.size(); ++j) {
          if (taken[j] || static_cast<int>(ignore[j]) != pass) continue;
          const double v = iou(d.box, g[j]);
          if (v >= best) {
            best = v;
            match = static_cast<long>(j);
          }
        }
      }
      if (match >= 0) {
        taken[static_cast<std::size_t>(match)] = 1;
        if (ignore[static_cast<std::size_t>(match)]) continue;
        entries.push_back({d.score, true});
      } else {
        if (!range.contains(d.box.area())) continue;
        entries.push_back({d.score, false});
      }
    }
  }
  if (npos == 0) return std::nullopt;
  std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.score > b.score; });
  std::vector<double> precision(entries.size()), recall(entries.size());
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    (entries[i].tp ? tp : fp) += 1;
    precision[i] = tp / (tp + fp);
    recall[i] = tp / static_cast<double>(npos);
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    auto it = std::lower_bound(recall.begin(), recall.end(), r - 1e-12);
    if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / 101.0;
}

/// Mean of defined per-threshold APs; nullopt if none is defined.
inline std::optional<double> mean_ap(const std::vector<std::vector<ScoredBox>>& dets, const std::vector<std::vector<Box>>& gts,
                                     const std::vector<double>& thresholds, AreaRange range = area_all()) {
  double s = 0;
  std::size_t n = 0;
  for (double t : thresholds)
    if (auto ap = compute_ap(dets, gts, t, range)) {
      s += *ap;
      ++n;
    }
  if (!n) return std::nullopt;
  return s / static_cast<double>(n);
}

struct MetricsReport {
  std::optional<double> ap, ap50, ap75, ap_s, ap_m, ap_l;
  double fps = 0;
  std::uint64_t params = 0;
  std::uint64_t ckpt_bytes = 0;
  std::int64_t peak_bytes = 0;

  nlohmann::json to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"ap", opt(ap)},     {"ap50", opt(ap50)},   {"ap75", opt(ap75)}, {"ap_s", opt(ap_s)},
            {"ap_m", opt(ap_m)}, {"ap_l", opt(ap_l)},   {"fps", fps},        {"params", params},
            {"ckpt_bytes", ckpt_bytes}, {"peak_bytes", peak_bytes}};
  }

  /// Aligned one-row table; absent APs render as "-".
  std::string table() const {
    auto cell = [](const std::optional<double>& v) {
      std::ostringstream os;
      if (v)
        os << std::fixed << std::setprecision(1) << 100.0 * *v;
      else
        os << "-";
      return os.str();
    };
    std::ostringstream os;
    os << std::left << std::setw(8) << "AP" << std::setw(8) << "AP50" << std::setw(8) << "AP75" << std::setw(8) << "AP_m"
       << std::setw(8) << "AP_l" << std::setw(10) << "FPS" << std::setw(12) << "Params" << "Size(MB)\n";
    os << std::setw(8) << cell(ap) << std::setw(8) << cell(ap50) << std::setw(8) << cell(ap75) << std::setw(8)
       << cell(ap_m) << std::setw(8) << cell(ap_l) << std::setw(10) << std::fixed << std::setprecision(2) << fps
       << std::setw(12) << params << std::setprecision(2) << static_cast<double>(ckpt_bytes) / (1024.0 * 1024.0) << "\n";
    return os.str();
  }
};

/// All AP fields of a report from per-image detections and ground truth.
inline MetricsReport evaluate_detections(const std::vector<std::vector<ScoredBox>>& dets,
                                         const std::vector<std::vector<Box>>& gts) {
  MetricsReport r;
  const auto thr = coco_iou_thresholds();
  r.ap = mean_ap(dets, gts, thr);
  r.ap50 = compute_ap(dets, gts, 0.5);
  r.ap75 = compute_ap(dets, gts, 0.75);
  r.ap_s = mean_ap(dets, gts, thr, area_small());
  r.ap_m = mean_ap(dets, gts, thr, area_medium());
  r.ap_l = mean_ap(dets, gts, thr, area_large());
  return r;
}

}  // namespace orefsdet
