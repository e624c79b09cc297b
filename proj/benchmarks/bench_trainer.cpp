#include <benchmark/benchmark.h>

#include "pldet/trainer.hpp"

namespace {

using namespace pldet;

void BM_TrainingStepSupervised(benchmark::State& state) {
  DetectorConfig det_cfg;
  SsplConfig sspl_cfg;
  HyperParams hp;
  hp.lambda_self_loc = hp.lambda_self_cont = hp.lambda_cons_cls = hp.lambda_cons_reg = 0.0;
  hp.warm_epochs = 0;
  auto train_state = init_state(det_cfg, sspl_cfg, hp, 1);
  SceneSpec spec;
  auto labeled = generate_example(spec, 2, true);
  for (auto _ : state) {
    auto breakdown = training_step(train_state, labeled, nullptr);
    benchmark::DoNotOptimize(breakdown.total);
  }
}
BENCHMARK(BM_TrainingStepSupervised);

void BM_TrainingStepFull(benchmark::State& state) {
  DetectorConfig det_cfg;
  SsplConfig sspl_cfg;
  HyperParams hp;
  hp.warm_epochs = 0;
  auto train_state = init_state(det_cfg, sspl_cfg, hp, 3);
  SceneSpec spec;
  auto labeled = generate_example(spec, 4, true);
  auto unlabeled = generate_example(spec, 5, false);
  for (auto _ : state) {
    auto breakdown = training_step(train_state, labeled, &unlabeled);
    benchmark::DoNotOptimize(breakdown.total);
  }
}
BENCHMARK(BM_TrainingStepFull);

}  // namespace

BENCHMARK_MAIN();
