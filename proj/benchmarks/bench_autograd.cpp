#include <benchmark/benchmark.h>

#include "pldet/autograd.hpp"
#include "pldet/rng.hpp"

namespace {

using namespace pldet;

ag::Tensor random_tensor(std::vector<int> shape, Rng& rng, bool requires_grad = true) {
  std::vector<double> data(ag::numel(shape));
  for (auto& v : data) v = rng.uniform(-1.0, 1.0);
  return ag::Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

void BM_Conv2dForward(benchmark::State& state) {
  Rng rng(1);
  auto x = random_tensor({16, 32, 32}, rng, false);
  auto w = random_tensor({32, 16, 3, 3}, rng, false);
  auto b = random_tensor({32}, rng, false);
  for (auto _ : state) {
    auto y = ag::conv2d(x, w, b, 2, 1);
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(BM_Conv2dForward);

void BM_Conv2dForwardBackward(benchmark::State& state) {
  Rng rng(2);
  auto x = random_tensor({16, 32, 32}, rng);
  auto w = random_tensor({32, 16, 3, 3}, rng);
  auto b = random_tensor({32}, rng);
  for (auto _ : state) {
    x.zero_grad();
    w.zero_grad();
    b.zero_grad();
    auto y = ag::sum(ag::conv2d(x, w, b, 2, 1));
    ag::backward(y);
    benchmark::DoNotOptimize(w.grad().data());
  }
}
BENCHMARK(BM_Conv2dForwardBackward);

void BM_LinearBatchForwardBackward(benchmark::State& state) {
  Rng rng(3);
  auto x = random_tensor({48, 512}, rng);
  auto w = random_tensor({128, 512}, rng);
  auto b = random_tensor({128}, rng);
  for (auto _ : state) {
    x.zero_grad();
    w.zero_grad();
    b.zero_grad();
    auto y = ag::sum(ag::square(ag::linear(x, w, b)));
    ag::backward(y);
    benchmark::DoNotOptimize(w.grad().data());
  }
}
BENCHMARK(BM_LinearBatchForwardBackward);

void BM_SoftmaxRows(benchmark::State& state) {
  Rng rng(4);
  auto x = random_tensor({64, 4}, rng, false);
  for (auto _ : state) {
    auto y = ag::softmax(x, 1);
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(BM_SoftmaxRows);

}  // namespace

BENCHMARK_MAIN();
