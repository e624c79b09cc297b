#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "pldet/checkpoint.hpp"
#include "pldet/config.hpp"
#include "pldet/errors.hpp"
#include "pldet/harness.hpp"

using namespace pldet;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

// small but non-degenerate experiment: 32x32 scenes, a few steps with all
// losses active
ExperimentConfig tiny_experiment(const std::string& out_dir) {
  ExperimentConfig cfg;
  cfg.scene.image_size = 32;
  cfg.scene.max_extent = 16.0;
  cfg.n_labeled = 6;
  cfg.n_unlabeled = 6;
  cfg.n_test = 4;
  cfg.detector.image_size = 32;
  cfg.detector.backbone_channels = 16;
  cfg.detector.roi_size = 2;
  cfg.detector.proposal_dim = 32;
  cfg.detector.anchor_scales = {10.0, 16.0, 24.0};
  cfg.detector.top_n_train = 8;
  cfg.detector.top_n_infer = 12;
  cfg.sspl.proposal_dim = 32;
  cfg.sspl.hidden_loc = 16;
  cfg.sspl.embed_dim = 8;
  cfg.hyper.k_variants = 2;
  cfg.hyper.epochs = 2;
  cfg.hyper.steps_per_epoch = 4;
  cfg.hyper.warm_epochs = 1;
  cfg.hyper.warmup_iters = 3;
  cfg.hyper.milestones = {2};
  cfg.hyper.fswa_last_epochs = 1;
  cfg.seed = 21;
  cfg.out_dir = out_dir;
  return cfg;
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("experiment config round-trips through serialization unchanged") {
  ExperimentConfig cfg = tiny_experiment("somewhere/out");
  cfg.toggles.self_cont = false;
  cfg.toggles.distill = true;
  cfg.distill.score_thresh = 0.8;
  std::string text = config_to_json_text(cfg);
  ExperimentConfig back = config_from_json_text(text);
  CHECK(config_to_json_text(back) == text);
}

TEST_CASE("config schema is strict") {
  CHECK_THROWS_AS(config_from_json_text(R"({"bogus": 1})"), ValueError);
  CHECK_THROWS_AS(config_from_json_text(R"({"scene": {"image_size": 64, "oops": 2}})"),
                  ValueError);
  CHECK_THROWS_AS(config_from_json_text(R"({"hyperparams": {"variant": "eq3"}})"), ValueError);
  CHECK_THROWS_AS(config_from_json_text(R"({"toggles": {"fswa": "yes"}})"), ValueError);
  CHECK_THROWS_AS(config_from_json_text("not json at all"), ValueError);
  // valid text parses
  ExperimentConfig ok = config_from_json_text(R"({"pools": {"labeled": 3}})");
  CHECK(ok.n_labeled == 3);
}

TEST_CASE("config validation catches bad combinations") {
  ExperimentConfig cfg = tiny_experiment("x");
  cfg.detector.image_size = 64;  // scene says 32
  CHECK_THROWS_AS(validate(cfg), ValueError);

  ExperimentConfig cfg2 = tiny_experiment("x");
  cfg2.hyper.tau = -1.0;
  CHECK_THROWS_AS(validate(cfg2), ValueError);

  ExperimentConfig cfg3 = tiny_experiment("x");
  cfg3.n_test = 0;
  CHECK_THROWS_AS(validate(cfg3), ValueError);
}

TEST_CASE("toggles map onto effective hyperparams") {
  ExperimentConfig cfg = tiny_experiment("x");
  cfg.toggles.self_loc = false;
  cfg.toggles.cons_reg = false;
  cfg.toggles.pl_on_labeled = false;
  cfg.toggles.fswa = true;
  HyperParams hp = effective_hyperparams(cfg);
  CHECK(hp.lambda_self_loc == 0.0);
  CHECK(hp.lambda_self_cont == cfg.hyper.lambda_self_cont);
  CHECK(hp.lambda_cons_cls == cfg.hyper.lambda_cons_cls);
  CHECK(hp.lambda_cons_reg == 0.0);
  CHECK(hp.variant == ObjectiveVariant::kEq2);
  CHECK(hp.use_fswa);

  cfg.toggles = LossToggles{};
  cfg.toggles.self_loc = cfg.toggles.self_cont = cfg.toggles.cons_cls = cfg.toggles.cons_reg =
      false;
  CHECK(!effective_hyperparams(cfg).pl_enabled());
}

TEST_CASE("checkpoint round-trips byte-exactly") {
  ExperimentConfig cfg = tiny_experiment(fresh_dir("pldet_ckpt_test").string());
  HyperParams hp = effective_hyperparams(cfg);
  TrainState state = init_state(cfg.detector, cfg.sspl, hp, 33);
  state.iter = 17;
  state.epoch = 2;
  state.rng.uniform();  // advance the stream so a non-initial state is saved

  fs::create_directories(cfg.out_dir);
  fs::path a = fs::path(cfg.out_dir) / "a.bin";
  fs::path b = fs::path(cfg.out_dir) / "b.bin";
  save_checkpoint(a.string(), state);
  TrainState loaded = load_checkpoint(a.string());
  CHECK(loaded.iter == state.iter);
  CHECK(loaded.epoch == state.epoch);
  CHECK(loaded.rng.engine() == state.rng.engine());
  auto p1 = snapshot_params(state);
  auto p2 = snapshot_params(loaded);
  REQUIRE(p1.size() == p2.size());
  for (size_t i = 0; i < p1.size(); ++i)
    for (size_t j = 0; j < p1[i].size(); ++j) CHECK(p1[i][j] == p2[i][j]);

  save_checkpoint(b.string(), loaded);
  CHECK(read_file(a) == read_file(b));
  fs::remove_all(cfg.out_dir);
}

TEST_CASE("run_train is deterministic and honors the supervised-only reduction") {
  fs::path base = fresh_dir("pldet_run_test");

  ExperimentConfig cfg1 = tiny_experiment((base / "r1").string());
  ExperimentConfig cfg2 = tiny_experiment((base / "r2").string());
  RunArtifacts a1 = run_train(cfg1);
  RunArtifacts a2 = run_train(cfg2);
  CHECK(read_file(a1.checkpoint_path) == read_file(a2.checkpoint_path));
  CHECK(read_file(a1.eval_path) == read_file(a2.eval_path));
  CHECK(read_file(a1.log_path) == read_file(a2.log_path));

  // all loss toggles off: the unlabeled pool is ignored entirely
  ExperimentConfig off1 = tiny_experiment((base / "off1").string());
  off1.toggles.self_loc = off1.toggles.self_cont = off1.toggles.cons_cls =
      off1.toggles.cons_reg = false;
  off1.toggles.pl_on_labeled = false;
  off1.toggles.fswa = false;
  ExperimentConfig off2 = off1;
  off2.out_dir = (base / "off2").string();
  off2.n_unlabeled = 0;
  RunArtifacts b1 = run_train(off1);
  RunArtifacts b2 = run_train(off2);
  CHECK(read_file(b1.checkpoint_path) == read_file(b2.checkpoint_path));
  CHECK(read_file(b1.eval_path) == read_file(b2.eval_path));
  fs::remove_all(base);
}

TEST_CASE("training log lines recombine to the reported totals") {
  fs::path base = fresh_dir("pldet_log_test");
  ExperimentConfig cfg = tiny_experiment(base.string());
  RunArtifacts artifacts = run_train(cfg);
  std::ifstream log(artifacts.log_path);
  std::string line;
  HyperParams hp = effective_hyperparams(cfg);
  int lines = 0;
  while (std::getline(log, line)) {
    auto j = nlohmann::json::parse(line);
    double total = j.at("total").get<double>();
    double recombined = j.at("rpn").get<double>() + j.at("rcnn").get<double>() +
                        hp.lambda_self_loc * j.at("self_loc").get<double>() +
                        hp.lambda_self_cont * j.at("self_cont").get<double>() +
                        hp.lambda_cons_cls * j.at("cons_cls").get<double>() +
                        hp.lambda_cons_reg * j.at("cons_reg").get<double>();
    CHECK(std::abs(total - recombined) <= 1e-12);
    ++lines;
  }
  CHECK(lines == cfg.hyper.epochs * cfg.hyper.steps_per_epoch);
  fs::remove_all(base);
}

TEST_CASE("ablation runner: row structure, shared seed, baseline deltas zero") {
  fs::path base = fresh_dir("pldet_ablate_test");
  ExperimentConfig cfg = tiny_experiment(base.string());

  auto rows = std::vector<AblationRow>{};
  LossToggles off;
  off.self_loc = off.self_cont = off.cons_cls = off.cons_reg = false;
  off.pl_on_labeled = false;
  off.fswa = false;
  rows.push_back({"baseline", off});
  LossToggles cont = off;
  cont.self_cont = true;
  rows.push_back({"self_cont", cont});
  LossToggles all = off;
  all.self_loc = all.self_cont = all.cons_cls = all.cons_reg = true;
  rows.push_back({"all", all});

  AblationReport report = run_ablation(cfg, rows, 2);
  REQUIRE(report.rows.size() == rows.size());
  CHECK(report.rows[0].name == "baseline");
  CHECK(report.rows[0].d_ap == 0.0);
  CHECK(report.rows[0].d_ap50 == 0.0);
  CHECK(report.rows[0].d_ap75 == 0.0);
  for (size_t i = 0; i < rows.size(); ++i) {
    CHECK(report.rows[i].d_ap ==
          doctest::Approx(report.rows[i].eval.ap - report.rows[0].eval.ap).epsilon(1e-12));
  }
  CHECK(fs::exists(base / "ablation.csv"));
  CHECK(fs::exists(base / "ablation.json"));
  // csv rows: header + one per row
  std::string csv = read_file(base / "ablation.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(rows.size()) + 1);

  // a non-baseline first row is rejected
  std::vector<AblationRow> bad = {{"all", all}};
  CHECK_THROWS_AS(run_ablation(cfg, bad, 1), ValueError);
  fs::remove_all(base);
}

TEST_CASE("default ablation rows mirror the component table") {
  auto rows = default_ablation_rows();
  REQUIRE(rows.size() == 11);
  CHECK(rows[0].name == "baseline");
  CHECK(rows[0].toggles.all_losses_off());
  CHECK(!rows[0].toggles.fswa);
  // each loss alone
  CHECK(rows[1].toggles.self_loc);
  CHECK(!rows[1].toggles.self_cont);
  CHECK(rows[2].toggles.self_cont);
  // pairs
  CHECK((rows[3].toggles.self_loc && rows[3].toggles.self_cont));
  CHECK((rows[6].toggles.cons_cls && rows[6].toggles.cons_reg));
  // all four, +labeled PL, fswa alone, everything
  CHECK((rows[7].toggles.self_loc && rows[7].toggles.cons_reg && !rows[7].toggles.pl_on_labeled));
  CHECK(rows[8].toggles.pl_on_labeled);
  CHECK((rows[9].toggles.fswa && rows[9].toggles.all_losses_off()));
  CHECK((rows[10].toggles.fswa && rows[10].toggles.pl_on_labeled));
}

TEST_CASE("distill pipeline completes and reports") {
  fs::path base = fresh_dir("pldet_distill_test");
  ExperimentConfig cfg = tiny_experiment(base.string());
  cfg.toggles.distill = true;
  cfg.distill.score_thresh = 0.5;
  DistillReport report = run_distill(cfg);
  CHECK(report.stats.num_input == cfg.n_unlabeled);
  CHECK(report.stats.num_pseudo_labeled >= 0);
  CHECK(report.stats.num_pseudo_labeled <= cfg.n_unlabeled);
  CHECK(report.pseudo_label_precision >= 0.0);
  CHECK(report.pseudo_label_precision <= 1.0);
  CHECK(fs::exists(base / "distill_report.json"));
  CHECK(fs::exists(base / "phase1_checkpoint.bin"));
  CHECK(fs::exists(base / "final_checkpoint.bin"));

  // threshold 1.0 excludes every pseudo label: phase 3 trains on the original pool
  ExperimentConfig strict = tiny_experiment((base / "strict").string());
  strict.toggles.distill = true;
  strict.distill.score_thresh = 1.0;
  DistillReport r2 = run_distill(strict);
  CHECK(r2.stats.num_pseudo_labeled == 0);
  fs::remove_all(base);
}
