#pragma once

#include <string>
#include <vector>

#include "orefsdet/backbone.hpp"
#include "orefsdet/config.hpp"
#include "orefsdet/image.hpp"
#include "orefsdet/proposal.hpp"
#include "orefsdet/rg_block.hpp"
#include "orefsdet/roi_head.hpp"
#include "orefsdet/sm_block.hpp"

namespace orefsdet {

/// Support side of an episode after mining: per-shot pyramids averaged into
/// one prototype pyramid (C x e x e per level).
template <typename T>
struct SupportEncoding {
  FeaturePyramid<T> prototype;
};

template <typename T>
struct LossBreakdown {
  Var<T> total;
  double stage1 = 0;
  double stage2 = 0;
};

struct InferenceResult {
  std::vector<Proposal> proposals;
  std::vector<Detection> detections;
};

/// The full few-shot detector: shared backbone/FPN, support mining, relation
/// guidance, CenterNet-style proposals and the dual-scale RoI head.
template <typename T>
class OreFSDet {
 public:
  explicit OreFSDet(const ModelConfig& cfg = {}) : cfg_(cfg) {
    if (cfg.cascade_stages != 1) throw std::invalid_argument("only a single cascade stage is supported");
    if (cfg.roi_res != std::vector<std::size_t>{4, 8}) throw std::invalid_argument("RoI resolutions are fixed at {4, 8}");
    Rng rng(mix_seed(cfg.init_seed, 0x1417));
    BackboneConfig bc;
    bc.fpn_channels = cfg.channels;
    backbone_ = BackboneFpn<T>(bc, rng);
    sm_ = SMParams<T>(cfg.channels, cfg.sm_segments, cfg.sm_reduction, rng);
    rg_ = RGParams<T>(cfg.channels, rng);
    proposal_ = ProposalHead<T>(cfg.channels, cfg.tower_width, rng);
    head_ = HeadParams<T>(cfg.channels, cfg.head_width, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const BackboneFpn<T>& backbone() const { return backbone_; }
  const SMParams<T>& sm() const { return sm_; }
  const RGParams<T>& rg() const { return rg_; }
  const ProposalHead<T>& proposal_head() const { return proposal_; }
  const HeadParams<T>& head() const { return head_; }

  ParameterList<T> parameters() const {
    ParameterList<T> p;
    backbone_.collect(p, "backbone");
    sm_.collect(p, "sm");
    rg_.collect(p, "rg");
    proposal_.collect(p, "proposal");
    head_.collect(p, "roi_head");
    return p;
  }

  ParameterList<T> backbone_parameters() const {
    ParameterList<T> p;
    backbone_.collect(p, "backbone");
    return p;
  }

  FeaturePyramid<T> extract(const Image& image) const {
    if constexpr (std::is_same_v<T, float>)
      return backbone_.extract(Var<T>(image));
    else
      return backbone_.extract(Var<T>(image.template cast<T>()));
  }

  /// Mines each shot's pyramid and averages them.
  SupportEncoding<T> encode_support(const std::vector<FeaturePyramid<T>>& shot_features) const {
    std::vector<FeaturePyramid<T>> mined;
    for (const auto& f : shot_features) mined.push_back(mine_support(f, sm_));
    return {support_prototype(mined)};
  }

  GuidanceMode guidance_mode() const {
    return cfg_.guidance == "global" ? GuidanceMode::kGlobalOnly : GuidanceMode::kFull;
  }

  Stage1Prediction<T> first_stage(const FeaturePyramid<T>& query, const SupportEncoding<T>& support) const {
    return proposal_.predict(guide(support.prototype, query, rg_, guidance_mode()));
  }

  /// Stage-1 + stage-2 training loss for one episode. Candidates for the
  /// second stage are the decoded proposals plus the ground-truth boxes.
  LossBreakdown<T> loss(const FeaturePyramid<T>& query, const SupportEncoding<T>& support, const std::vector<Box>& gt,
                        std::size_t image_h, std::size_t image_w, Rng& rng, const Stage2Options& s2 = {}) const {
    Stage1Prediction<T> preds = first_stage(query, support);
    Var<T> l1 = stage1_loss(preds, assign_targets<T>(gt, image_h, image_w));
    std::vector<Box> cands;
    for (const auto& p : decode(preds, image_h, image_w, {cfg_.proposals, 0.01})) cands.push_back(p.box);
    cands.insert(cands.end(), gt.begin(), gt.end());
    Stage2Options opt = s2;
    opt.positive_iou = cfg_.iou_thr;
    std::vector<Stage2Sample> samples = sample_stage2(cands, gt, rng, opt);
    LossBreakdown<T> out;
    out.stage1 = static_cast<double>(l1.value()[0]);
    out.total = l1;
    if (!samples.empty()) {
      std::vector<Box> boxes;
      for (const auto& s : samples) boxes.push_back(s.box);
      BatchedHeadOutput<T> h = run_head(query, support.prototype, boxes, head_);
      Var<T> l2 = stage2_loss(h.out, samples, h.order, opt.smooth_l1_beta);
      out.stage2 = static_cast<double>(l2.value()[0]);
      out.total = add(l1, l2);
    }
    return out;
  }

  InferenceResult infer(const FeaturePyramid<T>& query, const SupportEncoding<T>& support, std::size_t image_h,
                        std::size_t image_w, const DetectOptions& dopt = {}, double score_floor = 0.01) const {
    InferenceResult r;
    r.proposals = decode(first_stage(query, support), image_h, image_w, {cfg_.proposals, score_floor});
    r.detections = detect(query, support.prototype, r.proposals, head_, image_h, image_w, dopt);
    return r;
  }

  /// End-to-end inference on raw tensors (query resized already, supports 240x240).
  InferenceResult infer(const Image& query, const std::vector<Image>& supports, const DetectOptions& dopt = {},
                        double score_floor = 0.01) const {
    NoGradGuard ng;
    std::vector<FeaturePyramid<T>> shots;
    for (const auto& s : supports) shots.push_back(extract(s));
    return infer(extract(query), encode_support(shots), query.dim(1), query.dim(2), dopt, score_floor);
  }

 private:
  ModelConfig cfg_;
  BackboneFpn<T> backbone_;
  SMParams<T> sm_;
  RGParams<T> rg_;
  ProposalHead<T> proposal_;
  HeadParams<T> head_;
};

}  // namespace orefsdet
