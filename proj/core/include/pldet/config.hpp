#pragma once

#include <cstdint>
#include <string>

#include "pldet/detector.hpp"
#include "pldet/eval.hpp"
#include "pldet/scenes.hpp"
#include "pldet/sspl.hpp"
#include "pldet/trainer.hpp"

namespace pldet {

// Table-1-style loss/feature switches; off means the corresponding lambda is
// forced to zero (pl_on_labeled selects the eq3 objective).
struct LossToggles {
  bool self_loc = true;
  bool self_cont = true;
  bool cons_cls = true;
  bool cons_reg = true;
  bool pl_on_labeled = true;
  bool fswa = true;
  bool distill = false;

  bool all_losses_off() const { return !self_loc && !self_cont && !cons_cls && !cons_reg; }
  bool operator==(const LossToggles&) const = default;
};

struct DistillConfig {
  double score_thresh = 0.9;
  double nms_iou = 0.5;
};

struct ExperimentConfig {
  SceneSpec scene;
  int n_labeled = 50;
  int n_unlabeled = 500;
  int n_test = 64;
  DetectorConfig detector;
  SsplConfig sspl;      // proposal_dim mirrors detector.proposal_dim
  HyperParams hyper;    // variant/use_fswa are derived from toggles
  LossToggles toggles;
  EvalConfig eval;
  DistillConfig distill;
  std::uint64_t seed = 0;
  std::string out_dir;
};

void validate(const ExperimentConfig& cfg);

// toggles applied: lambdas zeroed for disabled losses, variant and fswa resolved
HyperParams effective_hyperparams(const ExperimentConfig& cfg);

// Strict parsing: unknown keys are rejected at every level; missing keys take
// the defaults above. Throws ValueError on any schema violation.
ExperimentConfig config_from_json_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);
std::string config_to_json_text(const ExperimentConfig& cfg);

// full hyperparams serialization (including resolved variant/use_fswa),
// used by the checkpoint header
std::string hyperparams_to_json_text(const HyperParams& hp);
HyperParams hyperparams_from_json_text(const std::string& text);
std::string detector_config_to_json_text(const DetectorConfig& cfg);
DetectorConfig detector_config_from_json_text(const std::string& text);
std::string sspl_config_to_json_text(const SsplConfig& cfg);
SsplConfig sspl_config_from_json_text(const std::string& text);

}  // namespace pldet
