#pragma once

#include <cstdint>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

namespace orefsdet {

struct ModelConfig {
  std::size_t channels = 64;         // FPN width C_f
  std::size_t sm_segments = 8;       // S; block extent is channels / S
  std::size_t sm_reduction = 4;      // C_hat = C / 4
  std::size_t tower_width = 64;      // proposal conv towers
  std::size_t head_width = 128;      // second-stage FC width
  std::size_t cascade_stages = 1;
  double iou_thr = 0.6;              // second-stage positive IoU
  std::size_t proposals = 256;
  std::vector<std::size_t> roi_res{4, 8};
  std::string guidance = "full";     // "full" or "global" (1x1-only ablation)
  std::uint64_t init_seed = 0;
};

struct TrainConfig {
  double lr = 0.001;             // fine-tuning learning rate
  double base_lr = 0.01;         // base phase
  double momentum = 0.9;
  double grad_clip = 10.0;       // global L2 norm; 0 disables
  std::size_t warmup_iters = 100;  // linear ramp from 0.1x
  double decay_at = 0.8;         // fraction of iterations after which lr drops 10x
  std::size_t base_iters = 2000;
  std::size_t finetune_iters = 2000;
  std::size_t batch = 1;
  std::size_t base_shots = 1;    // support crops per base-training episode
  std::size_t stage2_batch = 64;
  double stage2_positive_fraction = 0.5;
  std::uint64_t seed = 0;
  bool freeze_backbone = true;   // applies to fine-tuning
  std::size_t log_every = 50;
};

struct DataConfig {
  std::string base_source = "synth";   // "synth" or a COCO annotation path
  std::size_t base_images = 400;
  std::string base_density = "medium";
  std::string novel_source = "synth";
  std::string novel_category = "ore";
  std::string finetune_density = "sparse";
  std::string eval_density = "medium";
  std::size_t eval_images = 100;
  std::size_t image_size = 320;
};

struct EvalConfig {
  std::vector<double> iou_thresholds{0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95};
  double nms_iou = 0.5;
  std::size_t max_detections = 100;
  double score_floor = 0.01;
};

struct Config {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, channels, sm_segments, sm_reduction, tower_width, head_width,
                                                cascade_stages, iou_thr, proposals, roi_res, guidance, init_seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, lr, base_lr, momentum, grad_clip, warmup_iters, decay_at,
                                                base_iters, finetune_iters,
                                                batch, base_shots, stage2_batch, stage2_positive_fraction, seed,
                                                freeze_backbone, log_every)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataConfig, base_source, base_images, base_density, novel_source,
                                                novel_category, finetune_density, eval_density, eval_images, image_size)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalConfig, iou_thresholds, nms_iou, max_detections, score_floor)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Config, model, train, data, eval)

/// Lists "section.key" paths whose value differs from the defaults.
inline std::vector<std::string> config_overrides(const Config& cfg) {
  const nlohmann::json a = cfg, d = Config{};
  std::vector<std::string> out;
  for (auto it = a.begin(); it != a.end(); ++it)
    for (auto jt = it.value().begin(); jt != it.value().end(); ++jt)
      if (d[it.key()][jt.key()] != jt.value()) out.push_back(it.key() + "." + jt.key());
  return out;
}

}  // namespace orefsdet
