// pldet: train and evaluate a miniature semi-supervised two-stage detector
// on synthetic scenes.
//
// Verbs: gen-data, train, eval, ablate, distill.
// Exit codes: 0 success, 2 config error, 3 numeric abort.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "pldet/checkpoint.hpp"
#include "pldet/config.hpp"
#include "pldet/errors.hpp"
#include "pldet/harness.hpp"

namespace {

namespace fs = std::filesystem;

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

pldet::ExperimentConfig resolve_config(const CommonArgs& args, bool seed_required) {
  pldet::ExperimentConfig cfg = pldet::load_config(args.config_path);
  if (args.seed)
    cfg.seed = *args.seed;
  else if (seed_required)
    throw pldet::ValueError("--seed is required for this command");
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  pldet::validate(cfg);
  return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args, bool out_required) {
  cmd->add_option("--config", args.config_path, "experiment config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  auto* seed = cmd->add_option("--seed", args.seed, "run seed");
  (void)seed;
  auto* out = cmd->add_option("--out", args.out_dir, "output directory");
  if (out_required) out->required();
}

int run_gen_data(const CommonArgs& args) {
  pldet::ExperimentConfig cfg = resolve_config(args, true);
  pldet::Pools pools = pldet::make_pools(cfg.scene, cfg.n_labeled, cfg.n_unlabeled, cfg.seed);
  std::vector<pldet::Example> all = pools.labeled;
  all.insert(all.end(), pools.unlabeled.begin(), pools.unlabeled.end());
  std::string dir = (fs::path(cfg.out_dir) / "pool").string();
  pldet::export_pool(all, dir);
  std::cout << "wrote " << all.size() << " examples (" << pools.labeled.size() << " labeled, "
            << pools.unlabeled.size() << " unlabeled) to " << dir << "\n";
  return 0;
}

int run_train_cmd(const CommonArgs& args) {
  pldet::ExperimentConfig cfg = resolve_config(args, true);
  pldet::RunArtifacts artifacts = pldet::run_train(cfg);
  std::cout << "checkpoint: " << artifacts.checkpoint_path << "\n"
            << "log:        " << artifacts.log_path << "\n"
            << "eval:       " << artifacts.eval_path << "\n"
            << "AP " << artifacts.eval.ap << "  AP50 " << artifacts.eval.ap50 << "  AP75 "
            << artifacts.eval.ap75 << "  (" << artifacts.train_seconds << " s)\n";
  return 0;
}

int run_eval_cmd(const CommonArgs& args, const std::string& checkpoint_path) {
  pldet::ExperimentConfig cfg = resolve_config(args, true);
  pldet::TrainState state = pldet::load_checkpoint(checkpoint_path);
  std::vector<pldet::Example> pool;
  std::uint64_t test_seed = pldet::seed_combine(cfg.seed, 0x74657374ULL);
  for (int i = 0; i < cfg.n_test; ++i) {
    pldet::Example e = pldet::generate_example(cfg.scene, pldet::seed_combine(test_seed, i), true);
    e.id = 1'000'000 + i;
    pool.push_back(std::move(e));
  }
  pldet::EvalResult result = pldet::evaluate(pool, state.det, state.det_cfg, cfg.eval);
  std::string text = pldet::to_json(result);
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    std::ofstream f(fs::path(cfg.out_dir) / "eval.json");
    f << text << "\n";
  }
  std::cout << text << "\n";
  return 0;
}

int run_ablate_cmd(const CommonArgs& args) {
  pldet::ExperimentConfig cfg = resolve_config(args, true);
  int threads = pldet::thread_count_from_env();
  pldet::AblationReport report =
      pldet::run_ablation(cfg, pldet::default_ablation_rows(), threads);
  std::cout << pldet::ablation_to_csv(report);
  return 0;
}

int run_distill_cmd(const CommonArgs& args) {
  pldet::ExperimentConfig cfg = resolve_config(args, true);
  cfg.toggles.distill = true;
  pldet::DistillReport report = pldet::run_distill(cfg);
  std::cout << "phase1 AP " << report.phase1_eval.ap << "  pseudo-labeled "
            << report.stats.num_pseudo_labeled << "/" << report.stats.num_input << " examples ("
            << report.stats.num_boxes << " boxes, precision@0.5 "
            << report.pseudo_label_precision << ")\n"
            << "final  AP " << report.final_eval.ap << "  AP50 " << report.final_eval.ap50
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"miniature semi-supervised two-stage detector on synthetic scenes"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, eval_args, ablate_args, distill_args;
  std::string checkpoint_path;

  auto* gen = app.add_subcommand("gen-data", "generate and export labeled/unlabeled pools");
  add_common(gen, gen_args, true);
  auto* train = app.add_subcommand("train", "run the training protocol and evaluate");
  add_common(train, train_args, true);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on fresh test scenes");
  add_common(eval, eval_args, false);
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  auto* ablate = app.add_subcommand("ablate", "run the loss-component ablation table");
  add_common(ablate, ablate_args, true);
  auto* distill = app.add_subcommand("distill", "three-phase self-labeling pipeline");
  add_common(distill, distill_args, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return run_gen_data(gen_args);
    if (train->parsed()) return run_train_cmd(train_args);
    if (eval->parsed()) return run_eval_cmd(eval_args, checkpoint_path);
    if (ablate->parsed()) return run_ablate_cmd(ablate_args);
    if (distill->parsed()) return run_distill_cmd(distill_args);
  } catch (const pldet::ValueError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const pldet::ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const pldet::NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
