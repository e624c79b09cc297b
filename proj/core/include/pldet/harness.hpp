#pragma once

#include <string>
#include <vector>

#include "pldet/config.hpp"
#include "pldet/eval.hpp"
#include "pldet/trainer.hpp"

namespace pldet {

struct RunArtifacts {
  EvalResult eval;
  std::string checkpoint_path;
  std::string log_path;
  std::string eval_path;
  double train_seconds = 0.0;
};

// Full training protocol: pools from (scene, seed), warm phase, main phase,
// optional FSWA over the last epochs' snapshots, final evaluation. All
// artifacts land under cfg.out_dir.
RunArtifacts run_train(const ExperimentConfig& cfg);

struct AblationRow {
  std::string name;
  LossToggles toggles;
};

struct AblationReportRow {
  std::string name;
  LossToggles toggles;
  EvalResult eval;
  double d_ap = 0.0;    // signed deltas against the baseline row
  double d_ap50 = 0.0;
  double d_ap75 = 0.0;
};

struct AblationReport {
  std::vector<AblationReportRow> rows;
};

// Baseline row first; each row alone; pairs per module; all four; +labeled-PL;
// FSWA alone; everything.
std::vector<AblationRow> default_ablation_rows();

// One seeded run per row, all rows sharing the base config's seed. Rows run on
// up to `threads` workers (PLDET_THREADS; runs stay independent and
// deterministic either way). Writes ablation.csv and ablation.json.
AblationReport run_ablation(const ExperimentConfig& base, const std::vector<AblationRow>& rows,
                            int threads = 1);

std::string ablation_to_csv(const AblationReport& report);
std::string ablation_to_json(const AblationReport& report);

struct DistillReport {
  EvalResult phase1_eval;
  DistillStats stats;
  double pseudo_label_precision = 0.0;  // IoU >= 0.5 vs hidden truths
  EvalResult final_eval;
};

// Three phases: train with the full approach, pseudo-label the unlabeled pool
// with the flip-ensembled detector, re-train on the enlarged labeled pool.
DistillReport run_distill(const ExperimentConfig& cfg);

int thread_count_from_env();

}  // namespace pldet
