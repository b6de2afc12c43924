#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "orefsdet/box.hpp"
#include "orefsdet/image.hpp"
#include "orefsdet/layers.hpp"

namespace orefsdet {

/// Category ids used by the synthetic generator. Ore is the held-out novel class.
enum ShapeClass : int { kOre = 1, kRectangle = 2, kTriangle = 3, kRing = 4 };

inline const std::vector<std::pair<int, std::string>>& synthetic_categories() {
  static const std::vector<std::pair<int, std::string>> cats{
      {kOre, "ore"}, {kRectangle, "rectangle"}, {kTriangle, "triangle"}, {kRing, "ring"}};
  return cats;
}

enum class Density { kSparse, kMedium, kDense };

inline Density parse_density(const std::string& s) {
  if (s == "sparse") return Density::kSparse;
  if (s == "medium") return Density::kMedium;
  if (s == "dense") return Density::kDense;
  throw std::invalid_argument("unknown density '" + s + "' (expected sparse|medium|dense)");
}

inline std::string density_name(Density d) {
  switch (d) {
    case Density::kSparse:
      return "sparse";
    case Density::kMedium:
      return "medium";
    case Density::kDense:
      return "dense";
  }
  return "medium";
}

struct SynthParams {
  Density density = Density::kMedium;
  std::size_t height = 320;
  std::size_t width = 320;
  /// Relative sampling weights for ore, rectangle, triangle, ring.
  std::array<double, 4> class_mix{0.25, 0.25, 0.25, 0.25};
  double min_side = 40;
  double max_side = 100;

  std::size_t min_objects() const { return density == Density::kSparse ? 2 : density == Density::kMedium ? 4 : 8; }
  std::size_t max_objects() const { return density == Density::kSparse ? 4 : density == Density::kMedium ? 8 : 14; }
  /// Largest pairwise box IoU allowed.
  double max_overlap() const { return density == Density::kSparse ? 0.0 : density == Density::kMedium ? 0.4 : 0.6; }
};

struct Scene {
  Image image;
  std::vector<Box> boxes;
  std::vector<int> class_ids;
  std::uint64_t seed = 0;
};

namespace detail {

struct Rgb {
  float r, g, b;
};

inline Rgb hsv_to_rgb(double h, double s, double v) {
  const double c = v * s, hp = std::fmod(h, 1.0) * 6.0, x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  double r = 0, g = 0, b = 0;
  if (hp < 1) r = c, g = x;
  else if (hp < 2) r = x, g = c;
  else if (hp < 3) g = c, b = x;
  else if (hp < 4) g = x, b = c;
  else if (hp < 5) r = x, b = c;
  else r = c, b = x;
  const double m = v - c;
  return {static_cast<float>(r + m), static_cast<float>(g + m), static_cast<float>(b + m)};
}

struct Point {
  double x, y;
};

inline double cross(const Point& o, const Point& a, const Point& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

/// Andrew's monotone chain; counter-clockwise hull.
inline std::vector<Point> convex_hull(std::vector<Point> pts) {
  std::sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
  std::vector<Point> hull(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

inline bool inside_convex(const std::vector<Point>& hull, double x, double y) {
  for (std::size_t i = 0; i < hull.size(); ++i)
    if (cross(hull[i], hull[(i + 1) % hull.size()], {x, y}) < 0) return false;
  return true;
}

/// Per-pixel membership test for one object inside its placement square.
struct ShapeMask {
  std::function<bool(double, double)> inside;  // local coords in [0, side)
};

inline ShapeMask make_shape(int cls, double w, double h, Rng& rng) {
  switch (cls) {
    case kOre: {
      std::vector<Point> pts;
      const std::size_t n = 7 + uniform_index(rng, 5);
      for (std::size_t i = 0; i < n; ++i) {
        const double a = (static_cast<double>(i) + uniform(rng, -0.3, 0.3)) * 2 * M_PI / static_cast<double>(n);
        const double r = uniform(rng, 0.75, 1.0);
        pts.push_back({0.5 * w + 0.5 * w * r * std::cos(a), 0.5 * h + 0.5 * h * r * std::sin(a)});
      }
      auto hull = convex_hull(pts);
      return {[hull](double x, double y) { return inside_convex(hull, x, y); }};
    }
    case kRectangle: {
      const double mx = w * uniform(rng, 0.0, 0.1), my = h * uniform(rng, 0.0, 0.1);
      return {[=](double x, double y) { return x >= mx && x < w - mx && y >= my && y < h - my; }};
    }
    case kTriangle: {
      std::vector<Point> pts{{uniform(rng, 0, w), 0}, {0, h}, {w, h}};
      if (uniform(rng) < 0.5) pts = {{0, 0}, {w, 0}, {uniform(rng, 0, w), h}};
      auto hull = convex_hull(pts);
      return {[hull](double x, double y) { return inside_convex(hull, x, y); }};
    }
    default: {
      const double inner = uniform(rng, 0.45, 0.65);
      return {[=](double x, double y) {
        const double dx = (x - 0.5 * w) / (0.5 * w), dy = (y - 0.5 * h) / (0.5 * h);
        const double d = dx * dx + dy * dy;
        return d <= 1.0 && d >= inner * inner;
      }};
    }
  }
}

inline std::size_t sample_class(const std::array<double, 4>& mix, Rng& rng) {
  const double total = mix[0] + mix[1] + mix[2] + mix[3];
  double u = uniform(rng) * total;
  for (std::size_t i = 0; i < 4; ++i) {
    if (u < mix[i]) return i + 1;
    u -= mix[i];
  }
  return 4;
}

}  // namespace detail

/// Renders a seeded conveyor-like scene of textured ore blobs and flat
/// distractor shapes. Pixels are 8-bit quantized so PNG export is lossless.
inline Scene synth_scene(std::uint64_t seed, const SynthParams& params) {
  if (params.height < 64 || params.width < 64) throw std::invalid_argument("synth_scene: size must be >= 64");
  Rng rng(mix_seed(seed, 0x5ce9e));
  const std::size_t H = params.height, W = params.width;
  Scene scene;
  scene.seed = seed;
  scene.image = Image({3, H, W});

  // Background: dark belt with low-frequency bands and grain.
  const double base = uniform(rng, 0.18, 0.3);
  const double tint = uniform(rng, -0.03, 0.03);
  const double fx = uniform(rng, 0.01, 0.05), fy = uniform(rng, 0.01, 0.05), ph = uniform(rng, 0, 6.28);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double v = base + 0.04 * std::sin(fx * x + fy * y + ph) + uniform(rng, -0.03, 0.03);
      scene.image.at(0, y, x) = static_cast<float>(v + tint);
      scene.image.at(1, y, x) = static_cast<float>(v);
      scene.image.at(2, y, x) = static_cast<float>(v - tint);
    }

  const std::size_t target = params.min_objects() + uniform_index(rng, params.max_objects() - params.min_objects() + 1);
  std::vector<Box> placed;
  std::vector<int> classes;
  for (std::size_t attempt = 0; placed.size() < target && attempt < 400; ++attempt) {
    const double w = uniform(rng, params.min_side, params.max_side);
    const double h = std::clamp(w * uniform(rng, 0.7, 1.3), params.min_side, params.max_side);
    const double x0 = std::floor(uniform(rng, 0, static_cast<double>(W) - w));
    const double y0 = std::floor(uniform(rng, 0, static_cast<double>(H) - h));
    const Box cand{x0, y0, x0 + std::ceil(w), y0 + std::ceil(h)};
    bool ok = true;
    for (const Box& b : placed)
      if (iou(cand, b) > params.max_overlap() ||
          (params.max_overlap() == 0.0 && std::min(cand.x2, b.x2) > std::max(cand.x1, b.x1) &&
           std::min(cand.y2, b.y2) > std::max(cand.y1, b.y1))) {
        ok = false;
        break;
      }
    if (!ok) continue;
    placed.push_back(cand);
    classes.push_back(static_cast<int>(detail::sample_class(params.class_mix, rng)));
  }

  for (std::size_t k = 0; k < placed.size(); ++k) {
    const Box& slot = placed[k];
    const int cls = classes[k];
    const double w = slot.width(), h = slot.height();
    detail::ShapeMask mask = detail::make_shape(cls, w, h, rng);
    detail::Rgb color;
    if (cls == kOre)
      color = {static_cast<float>(uniform(rng, 0.48, 0.62)), static_cast<float>(uniform(rng, 0.4, 0.5)),
               static_cast<float>(uniform(rng, 0.3, 0.4))};
    else
      color = detail::hsv_to_rgb(uniform(rng), uniform(rng, 0.5, 0.9), uniform(rng, 0.55, 0.95));
    long bx0 = std::numeric_limits<long>::max(), by0 = bx0, bx1 = -1, by1 = -1;
    for (std::size_t yy = 0; yy < static_cast<std::size_t>(h); ++yy)
      for (std::size_t xx = 0; xx < static_cast<std::size_t>(w); ++xx) {
        const double lx = static_cast<double>(xx) + 0.5, ly = static_cast<double>(yy) + 0.5;
        if (!mask.inside(lx, ly)) continue;
        const long px = static_cast<long>(slot.x1) + static_cast<long>(xx);
        const long py = static_cast<long>(slot.y1) + static_cast<long>(yy);
        if (px < 0 || py < 0 || px >= static_cast<long>(W) || py >= static_cast<long>(H)) continue;
        double shade = 1.0, grain = 0.0;
        if (cls == kOre) {
          const double dx = (lx - 0.5 * w) / (0.5 * w), dy = (ly - 0.5 * h) / (0.5 * h);
          shade = 1.0 - 0.35 * (dx * dx + dy * dy) + 0.12 * (-dx - dy) * 0.5;
          grain = uniform(rng, -0.09, 0.09);
        } else {
          grain = uniform(rng, -0.02, 0.02);
        }
        scene.image.at(0, py, px) = static_cast<float>(color.r * shade + grain);
        scene.image.at(1, py, px) = static_cast<float>(color.g * shade + grain);
        scene.image.at(2, py, px) = static_cast<float>(color.b * shade + grain);
        bx0 = std::min(bx0, px);
        by0 = std::min(by0, py);
        bx1 = std::max(bx1, px);
        by1 = std::max(by1, py);
      }
    if (bx1 < bx0 || by1 < by0) continue;
    scene.boxes.push_back({static_cast<double>(bx0), static_cast<double>(by0), static_cast<double>(bx1 + 1),
                           static_cast<double>(by1 + 1)});
    scene.class_ids.push_back(cls);
  }
  for (auto& v : scene.image.values()) v = quantize8(v);
  return scene;
}

// ---------------------------------------------------------------------------
// Datasets (COCO-style)
// ---------------------------------------------------------------------------

struct Annotation {
  std::int64_t id = 0;
  int category_id = 0;
  Box box;
};

struct ImageRecord {
  std::int64_t id = 0;
  std::string file_name;
  std::size_t width = 0, height = 0;
  std::vector<Annotation> annotations;
};

/// Read-only after construction. Images load lazily, either from disk or
/// from an in-memory generator (synthetic data).
class Dataset {
 public:
  std::vector<ImageRecord> images;
  std::vector<std::pair<int, std::string>> categories;
  std::filesystem::path image_root;
  std::function<Image(std::size_t)> generator;

  std::size_t size() const { return images.size(); }

  Image load_image(std::size_t i) const {
    if (generator) return generator(i);
    return read_png(image_root / images.at(i).file_name);
  }

  std::optional<int> category_id(const std::string& name) const {
    for (const auto& [id, n] : categories)
      if (n == name) return id;
    return std::nullopt;
  }
};

/// In-memory synthetic dataset; image i is synth_scene(mix_seed(seed, i)).
inline Dataset synth_dataset(std::uint64_t seed, std::size_t n_images, const SynthParams& params) {
  Dataset ds;
  ds.categories = synthetic_categories();
  std::int64_t ann_id = 1;
  for (std::size_t i = 0; i < n_images; ++i) {
    const Scene s = synth_scene(mix_seed(seed, i), params);
    ImageRecord rec;
    rec.id = static_cast<std::int64_t>(i + 1);
    char name[32];
    std::snprintf(name, sizeof(name), "%06zu.png", i);
    rec.file_name = name;
    rec.width = params.width;
    rec.height = params.height;
    for (std::size_t k = 0; k < s.boxes.size(); ++k) rec.annotations.push_back({ann_id++, s.class_ids[k], s.boxes[k]});
    ds.images.push_back(std::move(rec));
  }
  ds.generator = [seed, params](std::size_t i) { return synth_scene(mix_seed(seed, i), params).image; };
  return ds;
}

inline nlohmann::json export_coco(const Dataset& ds) {
  using nlohmann::json;
  json doc;
  doc["images"] = json::array();
  doc["annotations"] = json::array();
  doc["categories"] = json::array();
  for (const auto& [id, name] : ds.categories) doc["categories"].push_back({{"id", id}, {"name", name}});
  for (const auto& rec : ds.images) {
    doc["images"].push_back(
        {{"id", rec.id}, {"file_name", rec.file_name}, {"width", rec.width}, {"height", rec.height}});
    for (const auto& a : rec.annotations)
      doc["annotations"].push_back({{"id", a.id},
                                    {"image_id", rec.id},
                                    {"category_id", a.category_id},
                                    {"bbox", {a.box.x1, a.box.y1, a.box.width(), a.box.height()}},
                                    {"area", a.box.area()},
                                    {"iscrowd", 0}});
  }
  return doc;
}

/// Parses a COCO-style document. Boxes [x, y, w, h] become (x1, y1, x2, y2);
/// images are resolved relative to `image_root` on first access.
inline Dataset ingest_coco_json(const nlohmann::json& doc, const std::filesystem::path& image_root) {
  Dataset ds;
  ds.image_root = image_root;
  auto fail = [](const std::string& what, const nlohmann::json& rec, const std::string& why) -> DataError {
    std::string id = rec.is_object() && rec.contains("id") ? rec["id"].dump() : std::string("?");
    return DataError(what + " " + id + ": " + why);
  };
  if (!doc.is_object() || !doc.contains("images") || !doc["images"].is_array())
    throw DataError("annotation document: missing 'images' array");
  std::map<std::int64_t, std::size_t> index;
  for (const auto& im : doc["images"]) {
    try {
      ImageRecord rec;
      rec.id = im.at("id").get<std::int64_t>();
      rec.file_name = im.at("file_name").get<std::string>();
      rec.width = im.value("width", std::size_t{0});
      rec.height = im.value("height", std::size_t{0});
      if (index.count(rec.id)) throw fail("image", im, "duplicate id");
      index[rec.id] = ds.images.size();
      ds.images.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw fail("image", im, e.what());
    }
  }
  if (doc.contains("categories"))
    for (const auto& c : doc["categories"]) {
      try {
        ds.categories.emplace_back(c.at("id").get<int>(), c.at("name").get<std::string>());
      } catch (const nlohmann::json::exception& e) {
        throw fail("category", c, e.what());
      }
    }
  if (doc.contains("annotations"))
    for (const auto& a : doc["annotations"]) {
      Annotation ann;
      std::int64_t image_id = 0;
      std::vector<double> bb;
      try {
        ann.id = a.at("id").get<std::int64_t>();
        image_id = a.at("image_id").get<std::int64_t>();
        ann.category_id = a.at("category_id").get<int>();
        bb = a.at("bbox").get<std::vector<double>>();
      } catch (const nlohmann::json::exception& e) {
        throw fail("annotation", a, e.what());
      }
      if (bb.size() != 4) throw fail("annotation", a, "bbox must have 4 entries");
      if (!(bb[2] > 0) || !(bb[3] > 0)) throw fail("annotation", a, "bbox width and height must be positive");
      auto it = index.find(image_id);
      if (it == index.end()) throw fail("annotation", a, "unknown image_id " + std::to_string(image_id));
      ann.box = {bb[0], bb[1], bb[0] + bb[2], bb[1] + bb[3]};
      ds.images[it->second].annotations.push_back(ann);
    }
  return ds;
}

inline Dataset ingest_coco(const std::filesystem::path& annotation_path) {
  std::ifstream in(annotation_path);
  if (!in) throw DataError("cannot open annotation file: " + annotation_path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("annotation file " + annotation_path.string() + ": " + e.what());
  }
  std::filesystem::path root = annotation_path.parent_path();
  if (std::filesystem::is_directory(root / "images")) root /= "images";
  return ingest_coco_json(doc, root);
}

/// Writes images/*.png and annotations.json under `dir`.
inline void materialize(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw DataError("cannot create " + (dir / "images").string() + ": " + ec.message());
  for (std::size_t i = 0; i < ds.size(); ++i) write_png(dir / "images" / ds.images[i].file_name, ds.load_image(i));
  std::ofstream out(dir / "annotations.json");
  if (!out) throw DataError("cannot write " + (dir / "annotations.json").string());
  out << export_coco(ds).dump(1) << '\n';
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

inline constexpr std::size_t kSupportSize = 240;
inline constexpr double kSupportMargin = 16.0;

struct QueryResize {
  std::size_t height, width;
  double scale_x, scale_y;
};

/// Short side to 320 unless the long side would exceed 1000; aspect preserved.
inline QueryResize query_resize(std::size_t h, std::size_t w, std::size_t short_side = 320, std::size_t max_long = 1000) {
  const std::size_t lo = std::min(h, w), hi = std::max(h, w);
  double s = static_cast<double>(short_side) / static_cast<double>(lo);
  std::size_t new_lo = short_side, new_hi = 0;
  if (static_cast<double>(hi) * s > static_cast<double>(max_long)) {
    s = static_cast<double>(max_long) / static_cast<double>(hi);
    new_hi = max_long;
    new_lo = static_cast<std::size_t>(std::max(1L, std::lround(static_cast<double>(lo) * s)));
  } else {
    new_hi = static_cast<std::size_t>(std::max(1L, std::lround(static_cast<double>(hi) * s)));
  }
  const std::size_t nh = h <= w ? new_lo : new_hi;
  const std::size_t nw = h <= w ? new_hi : new_lo;
  return {nh, nw, static_cast<double>(nw) / static_cast<double>(w), static_cast<double>(nh) / static_cast<double>(h)};
}

struct SupportCrop {
  Image image;   // 3 x 240 x 240
  Box region;    // where the scaled crop sits; everything else is 0
};

/// Instance crop (box + margin, clipped), scaled to fit 240 x 240 and
/// centred on a zero canvas.
inline SupportCrop make_support(const Image& img, const Box& box, double margin = kSupportMargin) {
  const long x0 = static_cast<long>(std::floor(box.x1 - margin)), y0 = static_cast<long>(std::floor(box.y1 - margin));
  const long x1 = static_cast<long>(std::ceil(box.x2 + margin)), y1 = static_cast<long>(std::ceil(box.y2 + margin));
  Image crop = crop_image(img, x0, y0, x1, y1);
  const double s = static_cast<double>(kSupportSize) / static_cast<double>(std::max(crop.dim(1), crop.dim(2)));
  const std::size_t nh = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(crop.dim(1) * s)), 1, kSupportSize);
  const std::size_t nw = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(crop.dim(2) * s)), 1, kSupportSize);
  Image scaled = resize_image(crop, nh, nw);
  SupportCrop out{Image({3, kSupportSize, kSupportSize}), {}};
  const std::size_t oy = (kSupportSize - nh) / 2, ox = (kSupportSize - nw) / 2;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < nh; ++y)
      for (std::size_t x = 0; x < nw; ++x) out.image.at(c, oy + y, ox + x) = scaled.at(c, y, x);
  out.region = {static_cast<double>(ox), static_cast<double>(oy), static_cast<double>(ox + nw), static_cast<double>(oy + nh)};
  return out;
}

struct Episode {
  Scene query;                       // resized; boxes of `class_id` only
  std::vector<SupportCrop> supports;  // K crops of the same class
  int class_id = 0;
  std::size_t query_index = 0;
  QueryResize resize{};
};

inline Scene prepare_query(const Image& img, const std::vector<Box>& boxes, QueryResize& rz) {
  rz = query_resize(img.dim(1), img.dim(2));
  Scene q;
  q.image = resize_image(img, rz.height, rz.width);
  for (const Box& b : boxes)
    q.boxes.push_back({b.x1 * rz.scale_x, b.y1 * rz.scale_y, b.x2 * rz.scale_x, b.y2 * rz.scale_y});
  return q;
}

/// Query containing `class_id` plus k_shot instance crops of that class from
/// other images. Pure function of its arguments.
inline Episode sample_episode(const Dataset& ds, int class_id, std::size_t k_shot, std::uint64_t seed) {
  if (k_shot == 0) throw std::invalid_argument("sample_episode: k_shot must be >= 1");
  Rng rng(mix_seed(seed, 0xe915));
  std::vector<std::size_t> with_class;
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (const auto& a : ds.images[i].annotations)
      if (a.category_id == class_id) {
        with_class.push_back(i);
        break;
      }
  if (with_class.empty()) throw DataError("sample_episode: no image contains class " + std::to_string(class_id));
  const std::size_t qi = with_class[uniform_index(rng, with_class.size())];
  std::vector<std::pair<std::size_t, std::size_t>> pool;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (i == qi) continue;
    for (std::size_t k = 0; k < ds.images[i].annotations.size(); ++k)
      if (ds.images[i].annotations[k].category_id == class_id) pool.emplace_back(i, k);
  }
  if (pool.size() < k_shot)
    throw DataError("sample_episode: insufficient shots for class " + std::to_string(class_id) + " (" +
                    std::to_string(pool.size()) + " < " + std::to_string(k_shot) + ")");
  for (std::size_t i = 0; i < k_shot; ++i) std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);

  Episode ep;
  ep.class_id = class_id;
  ep.query_index = qi;
  std::vector<Box> gt;
  for (const auto& a : ds.images[qi].annotations)
    if (a.category_id == class_id) gt.push_back(a.box);
  ep.query = prepare_query(ds.load_image(qi), gt, ep.resize);
  ep.query.class_ids.assign(ep.query.boxes.size(), class_id);
  std::map<std::size_t, Image> cache;
  for (std::size_t i = 0; i < k_shot; ++i) {
    const auto [img, k] = pool[i];
    auto it = cache.find(img);
    if (it == cache.end()) it = cache.emplace(img, ds.load_image(img)).first;
    ep.supports.push_back(make_support(it->second, ds.images[img].annotations[k].box));
  }
  return ep;
}

}  // namespace orefsdet
