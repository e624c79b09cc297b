#include "pldet/harness.hpp"

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "pldet/checkpoint.hpp"
#include "pldet/errors.hpp"

namespace pldet {

namespace {

namespace fs = std::filesystem;

std::vector<Example> make_test_pool(const ExperimentConfig& cfg) {
  // test scenes draw from the same distribution on a separate stream
  std::vector<Example> pool;
  pool.reserve(cfg.n_test);
  std::uint64_t test_seed = seed_combine(cfg.seed, 0x74657374ULL);  // "test" tag
  for (int i = 0; i < cfg.n_test; ++i) {
    Example e = generate_example(cfg.scene, seed_combine(test_seed, i), true);
    e.id = 1'000'000 + i;
    pool.push_back(std::move(e));
  }
  return pool;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw IoError("harness: cannot write " + path);
  f << text;
}

struct TrainOutcome {
  TrainState state;
  std::string log_text;
};

// core loop shared by run_train and the distill phases
TrainOutcome train_on_pools(const ExperimentConfig& cfg, const HyperParams& hp,
                            const std::vector<Example>& labeled,
                            const std::vector<Example>& unlabeled, std::uint64_t seed) {
  if (labeled.empty()) throw ValueError("harness: labeled pool is empty");
  TrainState state = init_state(cfg.detector, cfg.sspl, hp, seed);
  std::ostringstream log;
  log.precision(17);

  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    state.epoch = epoch;
    for (int step = 0; step < hp.steps_per_epoch; ++step) {
      const Example& lab = labeled[state.rng.uniform_int(0, static_cast<int>(labeled.size()) - 1)];
      const Example* unlab = nullptr;
      bool pl_active = hp.pl_enabled() && epoch >= hp.warm_epochs && !unlabeled.empty();
      if (pl_active)
        unlab = &unlabeled[state.rng.uniform_int(0, static_cast<int>(unlabeled.size()) - 1)];
      LossBreakdown b = training_step(state, lab, unlab);

      nlohmann::ordered_json line;
      line["iter"] = state.iter - 1;
      line["epoch"] = epoch;
      line["lr"] = b.lr;
      line["total"] = b.total;
      line["rpn"] = b.rpn;
      line["rcnn"] = b.rcnn;
      line["self_loc"] = b.self_loc;
      line["self_cont"] = b.self_cont;
      line["cons_cls"] = b.cons_cls;
      line["cons_reg"] = b.cons_reg;
      line["sel_labeled"] = b.sel_labeled;
      line["sel_unlabeled"] = b.sel_unlabeled;
      log << line.dump() << "\n";
    }
    if (hp.use_fswa && epoch >= hp.epochs - hp.fswa_last_epochs) {
      state.fswa_ring.push_back(snapshot_params(state));
      if (static_cast<int>(state.fswa_ring.size()) > hp.fswa_last_epochs)
        state.fswa_ring.erase(state.fswa_ring.begin());
    }
  }
  state.epoch = hp.epochs;
  if (hp.use_fswa && !state.fswa_ring.empty())
    restore_params(state, fswa_average(state.fswa_ring));
  return {std::move(state), log.str()};
}

}  // namespace

int thread_count_from_env() {
  const char* env = std::getenv("PLDET_THREADS");
  if (!env) return 1;
  int n = std::atoi(env);
  return n >= 1 ? n : 1;
}

RunArtifacts run_train(const ExperimentConfig& cfg) {
  validate(cfg);
  if (cfg.out_dir.empty()) throw ValueError("run_train: no output directory configured");
  fs::create_directories(cfg.out_dir);

  auto t0 = std::chrono::steady_clock::now();
  HyperParams hp = effective_hyperparams(cfg);
  Pools pools = make_pools(cfg.scene, cfg.n_labeled, cfg.n_unlabeled, cfg.seed);
  TrainOutcome outcome = train_on_pools(cfg, hp, pools.labeled, pools.unlabeled, cfg.seed);

  RunArtifacts artifacts;
  artifacts.eval = evaluate(make_test_pool(cfg), outcome.state.det, cfg.detector, cfg.eval);
  artifacts.train_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  artifacts.checkpoint_path = (fs::path(cfg.out_dir) / "checkpoint.bin").string();
  artifacts.log_path = (fs::path(cfg.out_dir) / "train_log.jsonl").string();
  artifacts.eval_path = (fs::path(cfg.out_dir) / "eval.json").string();
  save_checkpoint(artifacts.checkpoint_path, outcome.state);
  write_text(artifacts.log_path, outcome.log_text);
  write_text(artifacts.eval_path, to_json(artifacts.eval) + "\n");
  return artifacts;
}

std::vector<AblationRow> default_ablation_rows() {
  auto off = []() {
    LossToggles t;
    t.self_loc = t.self_cont = t.cons_cls = t.cons_reg = false;
    t.pl_on_labeled = false;
    t.fswa = false;
    t.distill = false;
    return t;
  };
  std::vector<AblationRow> rows;
  rows.push_back({"baseline", off()});
  auto add = [&](const std::string& name, auto mutate) {
    LossToggles t = off();
    mutate(t);
    rows.push_back({name, t});
  };
  add("self_loc", [](LossToggles& t) { t.self_loc = true; });
  add("self_cont", [](LossToggles& t) { t.self_cont = true; });
  add("self_loc+self_cont", [](LossToggles& t) { t.self_loc = t.self_cont = true; });
  add("cons_cls", [](LossToggles& t) { t.cons_cls = true; });
  add("cons_reg", [](LossToggles& t) { t.cons_reg = true; });
  add("cons_cls+cons_reg", [](LossToggles& t) { t.cons_cls = t.cons_reg = true; });
  add("all", [](LossToggles& t) { t.self_loc = t.self_cont = t.cons_cls = t.cons_reg = true; });
  add("all+plld", [](LossToggles& t) {
    t.self_loc = t.self_cont = t.cons_cls = t.cons_reg = true;
    t.pl_on_labeled = true;
  });
  add("fswa", [](LossToggles& t) { t.fswa = true; });
  add("all+plld+fswa", [](LossToggles& t) {
    t.self_loc = t.self_cont = t.cons_cls = t.cons_reg = true;
    t.pl_on_labeled = true;
    t.fswa = true;
  });
  return rows;
}

AblationReport run_ablation(const ExperimentConfig& base, const std::vector<AblationRow>& rows,
                            int threads) {
  if (rows.empty()) throw ValueError("run_ablation: empty row set");
  {
    LossToggles t = rows.front().toggles;
    if (!t.all_losses_off() || t.pl_on_labeled || t.fswa)
      throw ValueError("run_ablation: first row must be the fully-supervised baseline");
  }
  if (base.out_dir.empty()) throw ValueError("run_ablation: no output directory configured");
  fs::create_directories(base.out_dir);

  std::vector<AblationReportRow> report_rows(rows.size());
  std::vector<std::exception_ptr> errors(rows.size());

  auto run_row = [&](size_t i) {
    try {
      ExperimentConfig cfg = base;
      cfg.toggles = rows[i].toggles;
      cfg.toggles.distill = false;
      cfg.out_dir = (fs::path(base.out_dir) / ("row_" + std::to_string(i))).string();
      RunArtifacts artifacts = run_train(cfg);  // shared seed across rows
      report_rows[i] = {rows[i].name, rows[i].toggles, artifacts.eval, 0.0, 0.0, 0.0};
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };

  if (threads <= 1) {
    for (size_t i = 0; i < rows.size(); ++i) run_row(i);
  } else {
    std::vector<std::thread> workers;
    std::atomic<size_t> next{0};
    for (int t = 0; t < threads; ++t)
      workers.emplace_back([&]() {
        for (size_t i = next.fetch_add(1); i < rows.size(); i = next.fetch_add(1)) run_row(i);
      });
    for (auto& w : workers) w.join();
  }
  for (auto& err : errors)
    if (err) std::rethrow_exception(err);

  AblationReport report;
  const EvalResult& base_eval = report_rows.front().eval;
  for (auto& row : report_rows) {
    row.d_ap = row.eval.ap - base_eval.ap;
    row.d_ap50 = row.eval.ap50 - base_eval.ap50;
    row.d_ap75 = row.eval.ap75 - base_eval.ap75;
    report.rows.push_back(row);
  }
  write_text((fs::path(base.out_dir) / "ablation.csv").string(), ablation_to_csv(report));
  write_text((fs::path(base.out_dir) / "ablation.json").string(), ablation_to_json(report));
  return report;
}

std::string ablation_to_csv(const AblationReport& report) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  os << "name,self_loc,self_cont,cons_cls,cons_reg,pl_on_labeled,fswa,"
        "ap,ap50,ap75,d_ap,d_ap50,d_ap75\n";
  for (const auto& r : report.rows) {
    os << r.name << "," << r.toggles.self_loc << "," << r.toggles.self_cont << ","
       << r.toggles.cons_cls << "," << r.toggles.cons_reg << "," << r.toggles.pl_on_labeled << ","
       << r.toggles.fswa << "," << r.eval.ap << "," << r.eval.ap50 << "," << r.eval.ap75 << ","
       << r.d_ap << "," << r.d_ap50 << "," << r.d_ap75 << "\n";
  }
  return os.str();
}

std::string ablation_to_json(const AblationReport& report) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& r : report.rows) {
    nlohmann::ordered_json row;
    row["name"] = r.name;
    row["toggles"] = {{"self_loc", r.toggles.self_loc},
                      {"self_cont", r.toggles.self_cont},
                      {"cons_cls", r.toggles.cons_cls},
                      {"cons_reg", r.toggles.cons_reg},
                      {"pl_on_labeled", r.toggles.pl_on_labeled},
                      {"fswa", r.toggles.fswa}};
    row["eval"] = nlohmann::json::parse(to_json(r.eval));
    row["d_ap"] = r.d_ap;
    row["d_ap50"] = r.d_ap50;
    row["d_ap75"] = r.d_ap75;
    rows.push_back(row);
  }
  nlohmann::ordered_json j;
  j["rows"] = rows;
  return j.dump(2);
}

DistillReport run_distill(const ExperimentConfig& cfg) {
  validate(cfg);
  if (!cfg.toggles.distill) throw ValueError("run_distill: distill toggle is off");
  if (cfg.out_dir.empty()) throw ValueError("run_distill: no output directory configured");
  fs::create_directories(cfg.out_dir);

  // phase 1: train with the configured approach
  HyperParams hp = effective_hyperparams(cfg);
  Pools pools = make_pools(cfg.scene, cfg.n_labeled, cfg.n_unlabeled, cfg.seed);
  TrainOutcome phase1 = train_on_pools(cfg, hp, pools.labeled, pools.unlabeled, cfg.seed);
  std::vector<Example> test_pool = make_test_pool(cfg);

  DistillReport report;
  report.phase1_eval = evaluate(test_pool, phase1.state.det, cfg.detector, cfg.eval);
  save_checkpoint((fs::path(cfg.out_dir) / "phase1_checkpoint.bin").string(), phase1.state);

  // phase 2: pseudo-label the unlabeled pool with the flip ensemble
  auto [pseudo_pool, stats] = distill_label(phase1.state.det, cfg.detector, pools.unlabeled,
                                            cfg.distill.score_thresh, cfg.distill.nms_iou);
  report.stats = stats;

  // pseudo-label precision against hidden truths (the generator is replayed
  // with labels on; unlabeled generation draws identically)
  {
    int matched = 0, total = 0;
    for (const auto& pseudo : pseudo_pool) {
      Example hidden = generate_example(
          cfg.scene, seed_combine(cfg.seed, static_cast<std::uint64_t>(pseudo.id)), true);
      std::vector<char> used(hidden.truth->boxes.size(), 0);
      for (size_t b = 0; b < pseudo.truth->boxes.size(); ++b) {
        ++total;
        for (size_t g = 0; g < hidden.truth->boxes.size(); ++g) {
          if (used[g] || hidden.truth->classes[g] != pseudo.truth->classes[b]) continue;
          if (iou(hidden.truth->boxes[g], pseudo.truth->boxes[b]) >= 0.5) {
            used[g] = 1;
            ++matched;
            break;
          }
        }
      }
    }
    report.pseudo_label_precision = total > 0 ? static_cast<double>(matched) / total : 0.0;
  }

  // phase 3: re-train on the enlarged labeled pool; unlabeled slot keeps the
  // examples that received no pseudo labels (still usable for PL terms)
  std::vector<Example> labeled3 = pools.labeled;
  labeled3.insert(labeled3.end(), pseudo_pool.begin(), pseudo_pool.end());
  std::vector<char> has_pseudo(pools.unlabeled.size(), 0);
  for (const auto& p : pseudo_pool)
    for (size_t i = 0; i < pools.unlabeled.size(); ++i)
      if (pools.unlabeled[i].id == p.id) has_pseudo[i] = 1;
  std::vector<Example> unlabeled3;
  for (size_t i = 0; i < pools.unlabeled.size(); ++i)
    if (!has_pseudo[i]) unlabeled3.push_back(pools.unlabeled[i]);

  TrainOutcome phase3 =
      train_on_pools(cfg, hp, labeled3, unlabeled3, seed_combine(cfg.seed, 3));
  report.final_eval = evaluate(test_pool, phase3.state.det, cfg.detector, cfg.eval);
  save_checkpoint((fs::path(cfg.out_dir) / "final_checkpoint.bin").string(), phase3.state);

  nlohmann::ordered_json j;
  j["phase1_eval"] = nlohmann::json::parse(to_json(report.phase1_eval));
  j["pseudo_labels"] = {{"num_input", stats.num_input},
                        {"num_pseudo_labeled", stats.num_pseudo_labeled},
                        {"num_boxes", stats.num_boxes},
                        {"precision_iou50", report.pseudo_label_precision}};
  j["final_eval"] = nlohmann::json::parse(to_json(report.final_eval));
  write_text((fs::path(cfg.out_dir) / "distill_report.json").string(), j.dump(2) + "\n");
  return report;
}

}  // namespace pldet
