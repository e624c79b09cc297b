#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pldet/consistency.hpp"
#include "pldet/detector.hpp"
#include "pldet/noise.hpp"
#include "pldet/rng.hpp"
#include "pldet/scenes.hpp"
#include "pldet/sspl.hpp"

namespace pldet {

enum class ObjectiveVariant { kEq2, kEq3 };  // eq3 also applies PL losses to labeled images

struct HyperParams {
  double lambda_self_loc = 0.25;
  double lambda_self_cont = 1.0;
  double lambda_cons_cls = 1.0;
  double lambda_cons_reg = 0.5;
  double tau = 0.1;
  int k_variants = 4;
  std::vector<NoiseSpec> noise_specs = default_noise_specs();

  double base_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int warmup_iters = 100;
  std::vector<int> milestones = {16, 22};  // epochs at which lr is divided by 10
  int warm_epochs = 6;                     // labeled-only phase
  int epochs = 24;
  int steps_per_epoch = 200;

  double score_thresh = 0.5;   // unlabeled proposal selection, max fg prob
  double positive_iou = 0.5;   // labeled proposal selection / r-cnn matching
  ObjectiveVariant variant = ObjectiveVariant::kEq3;

  bool use_fswa = false;
  int fswa_last_epochs = 4;

  bool pl_enabled() const {
    return lambda_self_loc > 0 || lambda_self_cont > 0 || lambda_cons_cls > 0 ||
           lambda_cons_reg > 0;
  }
};

void validate(const HyperParams& hp);

// flat snapshot of all parameter values, in named_params order
using ParamSnapshot = std::vector<std::vector<double>>;

struct TrainState {
  DetectorConfig det_cfg;
  SsplConfig sspl_cfg;
  HyperParams hp;
  DetectorParams det;
  SsplParams sspl;
  std::vector<std::vector<double>> velocity;  // momentum buffers, named_params order
  long iter = 0;
  int epoch = 0;
  std::uint64_t seed = 0;
  Rng rng{0};  // mini-batch sampling stream
  std::vector<ParamSnapshot> fswa_ring;

  std::vector<std::pair<std::string, ag::Tensor>> named_params() const;
};

TrainState init_state(const DetectorConfig& det_cfg, const SsplConfig& sspl_cfg,
                      const HyperParams& hp, std::uint64_t seed);

// linear warmup from base/3 to base over warmup_iters, then /10 per passed milestone
double lr_at(long iter, int epoch, const HyperParams& hp);

// v <- m v + (g + wd p); p <- p - lr v. Aborts on non-finite gradients.
void sgd_update(TrainState& state, double lr);

ParamSnapshot snapshot_params(const TrainState& state);
void restore_params(TrainState& state, const ParamSnapshot& snap);
// elementwise arithmetic mean across checkpoints
ParamSnapshot fswa_average(const std::vector<ParamSnapshot>& checkpoints);

// Per-image forward pass shared by the losses.
struct ImageForward {
  ag::Tensor feature_map;
  RpnOut rpn;
  ProposalSet proposals;
  std::vector<ag::Tensor> roi_maps;  // per-proposal [C, r, r]
  HeadOutputs heads;
};

ImageForward forward_image(const Example& example, const TrainState& state);

// labeled: indices with IoU >= positive_iou against some GT box;
// unlabeled (truth absent): indices whose max foreground probability > score_thresh
std::vector<int> select_proposals(const ProposalSet& proposals, const ag::Tensor& class_probs,
                                  const std::optional<GroundTruth>& truth, double score_thresh,
                                  double positive_iou, int num_fg_classes);

// R-CNN term of Eq. 1: (1/N) sum_n [CE(C_n, target) + smooth-l1 on positives]
ag::Tensor rcnn_supervised_loss(const ProposalSet& proposals, const HeadOutputs& heads,
                                const GroundTruth& truth, const DetectorConfig& cfg,
                                double positive_iou);

// Eq. 1 on one labeled image: rpn_loss + rcnn_supervised_loss
ag::Tensor supervised_loss(const Example& example, const ImageForward& fwd,
                           const TrainState& state);

struct LossBreakdown {
  double total = 0.0;
  double rpn = 0.0;
  double rcnn = 0.0;
  double self_loc = 0.0;   // raw component values (before lambda weighting),
  double self_cont = 0.0;  // summed over the images contributing PL terms
  double cons_cls = 0.0;
  double cons_reg = 0.0;
  int sel_labeled = 0;
  int sel_unlabeled = 0;
  double lr = 0.0;

  double weighted_sum(const HyperParams& hp) const {
    return rpn + rcnn + hp.lambda_self_loc * self_loc + hp.lambda_self_cont * self_cont +
           hp.lambda_cons_cls * cons_cls + hp.lambda_cons_reg * cons_reg;
  }
};

// One optimizer step on (labeled, unlabeled). The unlabeled pointer may be
// null (PL terms skipped). During the warm phase only the supervised loss is
// built, so the unlabeled image contributes exactly zero gradient.
LossBreakdown training_step(TrainState& state, const Example& labeled, const Example* unlabeled);

struct DistillStats {
  int num_input = 0;
  int num_pseudo_labeled = 0;  // examples with >= 1 surviving box
  int num_boxes = 0;
};

// Two-transform (identity + horizontal flip) self-labeling: detections are
// merged per class by NMS, filtered by score, and attached as ground truth.
// Examples whose merged set is empty are excluded from the returned pool.
std::pair<std::vector<Example>, DistillStats> distill_label(
    const DetectorParams& params, const DetectorConfig& cfg, const std::vector<Example>& pool,
    double score_thresh, double nms_iou);

}  // namespace pldet
