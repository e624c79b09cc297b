#include <benchmark/benchmark.h>

#include "pldet/detector.hpp"
#include "pldet/scenes.hpp"

namespace {

using namespace pldet;

void BM_BackboneForward(benchmark::State& state) {
  DetectorConfig cfg;
  auto params = DetectorParams::init(cfg, 1);
  SceneSpec spec;
  auto example = generate_example(spec, 2, true);
  for (auto _ : state) {
    auto fb = backbone_forward(example.image, params, cfg);
    benchmark::DoNotOptimize(fb.data().data());
  }
}
BENCHMARK(BM_BackboneForward);

void BM_RoiAlign(benchmark::State& state) {
  DetectorConfig cfg;
  auto params = DetectorParams::init(cfg, 3);
  SceneSpec spec;
  auto example = generate_example(spec, 4, true);
  auto fb = backbone_forward(example.image, params, cfg);
  Box box{10, 12, 20, 18};
  for (auto _ : state) {
    auto roi = roi_align(fb, box, cfg.roi_size, cfg.stride);
    benchmark::DoNotOptimize(roi.data().data());
  }
}
BENCHMARK(BM_RoiAlign);

void BM_Detect(benchmark::State& state) {
  DetectorConfig cfg;
  auto params = DetectorParams::init(cfg, 5);
  SceneSpec spec;
  auto example = generate_example(spec, 6, true);
  for (auto _ : state) {
    auto dets = detect(example, params, cfg, 0.05, 0.5);
    benchmark::DoNotOptimize(dets.data());
  }
}
BENCHMARK(BM_Detect);

}  // namespace

BENCHMARK_MAIN();
