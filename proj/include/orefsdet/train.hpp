#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <nlohmann/json.hpp>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "orefsdet/checkpoint.hpp"
#include "orefsdet/episodes.hpp"
#include "orefsdet/eval.hpp"
#include "orefsdet/model.hpp"

namespace orefsdet {

using Model = OreFSDet<float>;

/// Worker cap from ORE_FSDET_THREADS (default: hardware concurrency).
inline std::size_t worker_count() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("ORE_FSDET_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) n = std::min(n, static_cast<std::size_t>(v));
  }
  return n;
}

/// Static-partition parallel loop; results must not depend on scheduling.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, std::size_t workers = worker_count()) {
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// SGD with heavy-ball momentum (v = m v + g; p -= lr v) and global-norm
/// clipping. Parameters with requires_grad == false are never touched.
class Sgd {
 public:
  Sgd(ParameterList<float> params, double momentum, double clip)
      : params_(std::move(params)), momentum_(momentum), clip_(clip), velocity_(params_.size()) {}

  /// Returns the pre-clip gradient norm.
  double step(double lr) {
    double sq = 0;
    for (const auto& p : params_)
      if (p.var.requires_grad() && p.var.has_grad())
        for (float g : p.var.grad().values()) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    const double factor = (clip_ > 0 && norm > clip_) ? clip_ / norm : 1.0;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Var<float> v = params_[i].var;
      if (!v.requires_grad() || !v.has_grad()) continue;
      Tensor<float>& vel = velocity_[i];
      if (vel.empty()) vel = Tensor<float>(v.shape());
      Tensor<float>& w = v.mutable_value();
      const Tensor<float>& g = v.grad();
      for (std::size_t k = 0; k < w.numel(); ++k) {
        vel[k] = static_cast<float>(momentum_ * vel[k] + factor * g[k]);
        w[k] = static_cast<float>(w[k] - lr * vel[k]);
      }
    }
    params_.zero_grad();
    return norm;
  }

  void zero_grad() { params_.zero_grad(); }

 private:
  ParameterList<float> params_;
  double momentum_, clip_;
  std::vector<Tensor<float>> velocity_;
};

/// Linear warm-up from 0.1x, constant, then a single 10x drop.
inline double scheduled_lr(double base, std::size_t iter, std::size_t total, const TrainConfig& tc) {
  double lr = base;
  if (tc.warmup_iters > 0 && iter < tc.warmup_iters)
    lr *= 0.1 + 0.9 * static_cast<double>(iter) / static_cast<double>(tc.warmup_iters);
  if (static_cast<double>(iter) >= tc.decay_at * static_cast<double>(total)) lr *= 0.1;
  return lr;
}

/// Freezes (or unfreezes) backbone + FPN.
inline void set_backbone_trainable(const Model& model, bool trainable) {
  for (auto& p : model.backbone_parameters()) {
    Var<float> v = p.var;
    v.set_requires_grad(trainable);
  }
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

inline SynthParams synth_params(const std::string& density, std::array<double, 4> mix, std::size_t size) {
  SynthParams p;
  p.density = parse_density(density);
  p.class_mix = mix;
  p.height = p.width = size;
  return p;
}

/// Base-class training set. Synthetic scenes never contain the novel class.
inline Dataset make_base_dataset(const DataConfig& dc, std::uint64_t seed) {
  if (dc.base_source == "synth")
    return synth_dataset(mix_seed(seed, 0xba5e), dc.base_images, synth_params(dc.base_density, {0, 1, 1, 1}, dc.image_size));
  return ingest_coco(dc.base_source);
}

inline std::vector<int> base_classes(const Dataset& ds, const std::string& novel) {
  std::vector<int> out;
  for (const auto& [id, name] : ds.categories)
    if (name != novel) {
      for (const auto& rec : ds.images)
        if (std::any_of(rec.annotations.begin(), rec.annotations.end(), [&](const Annotation& a) { return a.category_id == id; })) {
          out.push_back(id);
          break;
        }
    }
  if (out.empty()) throw DataError("base dataset has no annotated base classes");
  return out;
}

/// One query scene of the novel class in model input resolution.
struct NovelScene {
  Image image;
  std::vector<Box> boxes;
};

/// The few-shot protocol: K pool scenes with exactly one novel instance each
/// (their crops form the support bank, so K annotated instances in total) and
/// a held-out evaluation set that also contains distractors.
struct NovelSetup {
  std::vector<NovelScene> pool;
  std::vector<Image> bank;
  std::vector<NovelScene> eval;
};

namespace detail {

inline NovelScene to_novel(const Image& img, const std::vector<Box>& boxes) {
  QueryResize rz;
  Scene q = prepare_query(img, boxes, rz);
  return {std::move(q.image), std::move(q.boxes)};
}

inline std::vector<Box> boxes_of(const Scene& s, int cls) {
  std::vector<Box> out;
  for (std::size_t i = 0; i < s.boxes.size(); ++i)
    if (s.class_ids[i] == cls) out.push_back(s.boxes[i]);
  return out;
}

}  // namespace detail

/// Evaluation scenes depend only on the data config, so every training seed
/// is scored on the same held-out set.
inline std::vector<NovelScene> synth_eval_scenes(const DataConfig& dc) {
  const SynthParams p = synth_params(dc.eval_density, {1, 1, 1, 1}, dc.image_size);
  std::vector<NovelScene> out;
  for (std::uint64_t j = 0; out.size() < dc.eval_images; ++j) {
    Scene s = synth_scene(mix_seed(0xe7a1, j), p);
    auto gt = detail::boxes_of(s, kOre);
    if (gt.empty()) continue;
    out.push_back(detail::to_novel(s.image, gt));
  }
  return out;
}

/// Pools for different K under one seed are nested prefixes of each other.
inline NovelSetup make_novel_setup(const DataConfig& dc, std::size_t shots, std::uint64_t seed, bool with_eval = true) {
  if (shots == 0) throw std::invalid_argument("shots must be >= 1");
  NovelSetup ns;
  if (dc.novel_source == "synth") {
    if (dc.novel_category != "ore") throw DataError("synthetic novel class must be 'ore'");
    const SynthParams p = synth_params(dc.finetune_density, {1, 1, 1, 1}, dc.image_size);
    for (std::uint64_t j = 0; ns.pool.size() < shots; ++j) {
      Scene s = synth_scene(mix_seed(mix_seed(seed, 0xf00d), j), p);
      auto gt = detail::boxes_of(s, kOre);
      if (gt.size() != 1) continue;
      ns.bank.push_back(make_support(s.image, gt[0]).image);
      ns.pool.push_back(detail::to_novel(s.image, gt));
    }
    if (with_eval) ns.eval = synth_eval_scenes(dc);
    return ns;
  }
  Dataset ds = ingest_coco(dc.novel_source);
  const auto cls = ds.category_id(dc.novel_category);
  if (!cls) throw DataError("novel category '" + dc.novel_category + "' not in " + dc.novel_source);
  std::vector<std::size_t> with;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (std::any_of(ds.images[i].annotations.begin(), ds.images[i].annotations.end(),
                    [&](const Annotation& a) { return a.category_id == *cls; }))
      with.push_back(i);
  if (with.size() <= shots)
    throw DataError("insufficient shots: " + std::to_string(with.size()) + " images contain '" + dc.novel_category + "'");
  Rng rng(mix_seed(seed, 0xf00d));
  for (std::size_t i = 0; i < shots; ++i) std::swap(with[i], with[i + uniform_index(rng, with.size() - i)]);
  auto gt_of = [&](std::size_t i) {
    std::vector<Box> gt;
    for (const auto& a : ds.images[i].annotations)
      if (a.category_id == *cls) gt.push_back(a.box);
    return gt;
  };
  for (std::size_t k = 0; k < with.size(); ++k) {
    const Image img = ds.load_image(with[k]);
    const auto gt = gt_of(with[k]);
    if (k < shots) {
      ns.bank.push_back(make_support(img, gt[0]).image);
      ns.pool.push_back(detail::to_novel(img, {gt[0]}));
    } else if (with_eval && ns.eval.size() < dc.eval_images) {
      ns.eval.push_back(detail::to_novel(img, gt));
    }
  }
  return ns;
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct StepRecord {
  std::size_t iter = 0;
  double loss = 0, stage1 = 0, stage2 = 0, lr = 0, grad_norm = 0;
  nlohmann::json to_json(const std::string& phase) const {
    return {{"phase", phase}, {"iter", iter}, {"loss", loss}, {"stage1", stage1}, {"stage2", stage2}, {"lr", lr},
            {"grad_norm", grad_norm}};
  }
};

struct TrainHooks {
  std::ostream* log = nullptr;                        // JSON lines
  std::function<void(const StepRecord&)> on_step;     // every iteration
};

inline Stage2Options stage2_options(const Config& cfg) {
  Stage2Options o;
  o.batch = cfg.train.stage2_batch;
  o.positive_fraction = cfg.train.stage2_positive_fraction;
  return o;
}

inline void emit(const TrainHooks& hooks, const StepRecord& r, const std::string& phase, std::size_t log_every,
                 std::size_t total) {
  if (hooks.on_step) hooks.on_step(r);
  if (hooks.log && log_every && (r.iter % log_every == 0 || r.iter + 1 == total))
    *hooks.log << r.to_json(phase).dump() << '\n' << std::flush;
}

/// Loss of base-training iteration `iter` for the current weights, with
/// gradients accumulated into the parameters. Every random choice derives
/// from (seed, iter), so a resumed run replays the same episodes.
inline StepRecord base_step(const Model& model, const Config& cfg, const Dataset& ds, const std::vector<int>& classes,
                            std::size_t iter) {
  StepRecord r;
  r.iter = iter;
  const std::size_t batch = std::max<std::size_t>(1, cfg.train.batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::uint64_t es = mix_seed(mix_seed(cfg.train.seed, 0xba5e0), iter * batch + b);
    Rng rng(es);
    const int cls = classes[uniform_index(rng, classes.size())];
    Episode ep = sample_episode(ds, cls, cfg.train.base_shots, es);
    const Image& q = ep.query.image;
    std::vector<FeaturePyramid<float>> shots;
    for (const auto& s : ep.supports) shots.push_back(model.extract(s.image));
    LossBreakdown<float> l = model.loss(model.extract(q), model.encode_support(shots), ep.query.boxes, q.dim(1), q.dim(2),
                                        rng, stage2_options(cfg));
    Var<float> total = batch > 1 ? scale(l.total, 1.0f / static_cast<float>(batch)) : l.total;
    total.backward();
    r.loss += static_cast<double>(total.value()[0]);
    r.stage1 += l.stage1 / static_cast<double>(batch);
    r.stage2 += l.stage2 / static_cast<double>(batch);
  }
  return r;
}

/// Base phase over iterations [first, cfg.train.base_iters).
inline void base_train(Model& model, const Config& cfg, const TrainHooks& hooks = {}, std::size_t first = 0) {
  set_backbone_trainable(model, true);
  const Dataset ds = make_base_dataset(cfg.data, cfg.train.seed);
  const auto classes = base_classes(ds, cfg.data.novel_category);
  Sgd opt(model.parameters(), cfg.train.momentum, cfg.train.grad_clip);
  const std::size_t total = cfg.train.base_iters;
  for (std::size_t it = first; it < total; ++it) {
    StepRecord r = base_step(model, cfg, ds, classes, it);
    r.lr = scheduled_lr(cfg.train.base_lr, it, total, cfg.train);
    r.grad_norm = opt.step(r.lr);
    emit(hooks, r, "base", cfg.train.log_every, total);
  }
}

/// Precomputed frozen-backbone features for fine-tuning.
struct FinetuneCache {
  std::vector<FeaturePyramid<float>> bank;
  std::vector<FeaturePyramid<float>> queries;
};

inline FinetuneCache build_finetune_cache(const Model& model, const NovelSetup& ns) {
  NoGradGuard ng;
  FinetuneCache c;
  for (const auto& img : ns.bank) c.bank.push_back(model.extract(img));
  for (const auto& s : ns.pool) c.queries.push_back(model.extract(s.image));
  return c;
}

inline StepRecord finetune_step(const Model& model, const Config& cfg, const NovelSetup& ns, const FinetuneCache& cache,
                                std::size_t iter) {
  StepRecord r;
  r.iter = iter;
  const std::size_t batch = std::max<std::size_t>(1, cfg.train.batch);
  for (std::size_t b = 0; b < batch; ++b) {
    Rng rng(mix_seed(mix_seed(cfg.train.seed, 0xf17e), iter * batch + b));
    const std::size_t q = uniform_index(rng, cache.queries.size());
    const NovelScene& s = ns.pool[q];
    LossBreakdown<float> l = model.loss(cache.queries[q], model.encode_support(cache.bank), s.boxes,
                                        s.image.dim(1), s.image.dim(2), rng, stage2_options(cfg));
    Var<float> total = batch > 1 ? scale(l.total, 1.0f / static_cast<float>(batch)) : l.total;
    total.backward();
    r.loss += static_cast<double>(total.value()[0]);
    r.stage1 += l.stage1 / static_cast<double>(batch);
    r.stage2 += l.stage2 / static_cast<double>(batch);
  }
  return r;
}

/// Fine-tuning on the K-shot pool with backbone + FPN frozen (when
/// configured); iterations [first, cfg.train.finetune_iters).
inline void finetune(Model& model, const Config& cfg, const NovelSetup& ns, const TrainHooks& hooks = {},
                     std::size_t first = 0) {
  set_backbone_trainable(model, !cfg.train.freeze_backbone);
  Sgd opt(model.parameters(), cfg.train.momentum, cfg.train.grad_clip);
  const std::size_t total = cfg.train.finetune_iters;
  if (cfg.train.freeze_backbone) {
    const FinetuneCache cache = build_finetune_cache(model, ns);
    for (std::size_t it = first; it < total; ++it) {
      StepRecord r = finetune_step(model, cfg, ns, cache, it);
      r.lr = scheduled_lr(cfg.train.lr, it, total, cfg.train);
      r.grad_norm = opt.step(r.lr);
      emit(hooks, r, "finetune", cfg.train.log_every, total);
    }
  } else {
    for (std::size_t it = first; it < total; ++it) {
      Rng rng(mix_seed(mix_seed(cfg.train.seed, 0xf17e), it));
      const NovelScene& s = ns.pool[uniform_index(rng, ns.pool.size())];
      std::vector<FeaturePyramid<float>> bank;
      for (const auto& img : ns.bank) bank.push_back(model.extract(img));
      LossBreakdown<float> l = model.loss(model.extract(s.image), model.encode_support(bank), s.boxes, s.image.dim(1),
                                          s.image.dim(2), rng, stage2_options(cfg));
      l.total.backward();
      StepRecord r{it, static_cast<double>(l.total.value()[0]), l.stage1, l.stage2, 0, 0};
      r.lr = scheduled_lr(cfg.train.lr, it, total, cfg.train);
      r.grad_norm = opt.step(r.lr);
      emit(hooks, r, "finetune", cfg.train.log_every, total);
    }
  }
  set_backbone_trainable(model, true);
}

// ---------------------------------------------------------------------------
// Evaluation and benchmark
// ---------------------------------------------------------------------------

inline DetectOptions detect_options(const EvalConfig& ec) { return {ec.nms_iou, ec.max_detections}; }

/// Runs the detector on every scene with the support bank as prototype.
inline std::vector<std::vector<Detection>> detect_scenes(const Model& model, const std::vector<Image>& bank,
                                                         const std::vector<NovelScene>& scenes, const EvalConfig& ec) {
  NoGradGuard ng;
  std::vector<FeaturePyramid<float>> shots;
  for (const auto& img : bank) shots.push_back(model.extract(img));
  const SupportEncoding<float> support = model.encode_support(shots);
  std::vector<std::vector<Detection>> out(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) {
    NoGradGuard local;
    const auto& s = scenes[i];
    out[i] = model.infer(model.extract(s.image), support, s.image.dim(1), s.image.dim(2), detect_options(ec),
                         ec.score_floor)
                 .detections;
  });
  return out;
}

inline MetricsReport evaluate(const Model& model, const std::vector<Image>& bank, const std::vector<NovelScene>& scenes,
                              const EvalConfig& ec) {
  const auto dets = detect_scenes(model, bank, scenes, ec);
  std::vector<std::vector<ScoredBox>> sd(scenes.size());
  std::vector<std::vector<Box>> gts(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    for (const auto& d : dets[i]) sd[i].push_back({d.box, d.score});
    gts[i] = scenes[i].boxes;
  }
  MetricsReport r = evaluate_detections(sd, gts);
  r.params = count_parameters(model.parameters());
  return r;
}

struct BenchResult {
  double fps = 0;
  double median_seconds = 0;
  std::uint64_t params = 0;
  std::uint64_t ckpt_bytes = 0;
  std::int64_t peak_bytes = 0;
  nlohmann::json to_json() const {
    return {{"fps", fps}, {"median_seconds", median_seconds}, {"params", params}, {"ckpt_bytes", ckpt_bytes},
            {"peak_bytes", peak_bytes}};
  }
};

/// Median wall-clock of query-side inference (extract, guide, decode,
/// detect) on a short-side-320 scene; the class prototype is computed once
/// beforehand as it would be in deployment.
inline BenchResult bench(const Model& model, const Config& cfg, std::size_t warmup = 5, std::size_t iters = 50) {
  NoGradGuard ng;
  const SynthParams p = synth_params("medium", {1, 1, 1, 1}, cfg.data.image_size);
  Scene s = synth_scene(0xbe4c, p);
  QueryResize rz;
  const Scene q = prepare_query(s.image, s.boxes, rz);
  const Image support = make_support(s.image, s.boxes.empty() ? Box{0, 0, 64, 64} : s.boxes[0]).image;
  const SupportEncoding<float> enc = model.encode_support({model.extract(support)});
  std::vector<double> times;
  const std::int64_t base_live = counters().live_bytes;
  reset_peak_bytes();
  for (std::size_t i = 0; i < warmup + iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    auto r = model.infer(model.extract(q.image), enc, q.image.dim(1), q.image.dim(2), detect_options(cfg.eval),
                         cfg.eval.score_floor);
    const auto t1 = std::chrono::steady_clock::now();
    if (i >= warmup) times.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  BenchResult b;
  std::sort(times.begin(), times.end());
  const std::size_t n = times.size();
  b.median_seconds = n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
  b.fps = b.median_seconds > 0 ? 1.0 / b.median_seconds : 0.0;
  b.peak_bytes = counters().peak_bytes - base_live;
  const auto params = model.parameters();
  b.params = count_parameters(params);
  b.ckpt_bytes = serialize_checkpoint(params, {cfg, 0, "bench"}).size();
  return b;
}

// ---------------------------------------------------------------------------
// Full pipeline
// ---------------------------------------------------------------------------

struct PipelineResult {
  std::string base_checkpoint;      // serialized bytes
  std::string finetune_checkpoint;  // serialized bytes
  MetricsReport report;
};

/// base-train -> K-shot finetune -> evaluation, all in memory.
inline PipelineResult run_pipeline(const Config& cfg, std::size_t shots, const TrainHooks& hooks = {}) {
  Model model(cfg.model);
  base_train(model, cfg, hooks);
  PipelineResult r;
  r.base_checkpoint = serialize_checkpoint(model.parameters(), {cfg, cfg.train.base_iters, "base"});
  const NovelSetup ns = make_novel_setup(cfg.data, shots, cfg.train.seed);
  finetune(model, cfg, ns, hooks);
  r.finetune_checkpoint = serialize_checkpoint(model.parameters(), {cfg, cfg.train.finetune_iters, "finetune"});
  r.report = evaluate(model, ns.bank, ns.eval, cfg.eval);
  r.report.ckpt_bytes = r.finetune_checkpoint.size();
  return r;
}

}  // namespace orefsdet
