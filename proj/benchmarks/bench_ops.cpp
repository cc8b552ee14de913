#include <benchmark/benchmark.h>

#include "mlqa/metrics.hpp"
#include "mlqa/ops.hpp"
#include "mlqa/rng.hpp"

using namespace mlqa;

namespace {

Tensor random_tensor(Shape shape, DType dt, std::uint64_t seed, bool requires_grad = false) {
  Rng rng(seed);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor::from_values(std::move(shape), v, dt, requires_grad);
}

void BM_MatmulBatched(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_tensor({8, n, n}, DType::kF32, 1);
  const Tensor b = random_tensor({8, n, n}, DType::kF32, 2);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * 8 * 2 * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_MatmulBatched)->Arg(16)->Arg(64)->Arg(128);

void BM_SoftmaxForwardBackward(benchmark::State& state) {
  const auto keys = static_cast<std::size_t>(state.range(0));
  const Tensor x = random_tensor({16, 4, 16, keys}, DType::kF32, 3, true);
  for (auto _ : state) {
    Tensor y = sum(square(softmax_last(x)));
    y.backward();
    benchmark::DoNotOptimize(y);
  }
}
BENCHMARK(BM_SoftmaxForwardBackward)->Arg(17)->Arg(65);

void BM_LayerNorm(benchmark::State& state) {
  const Tensor x = random_tensor({16, 65, 64}, DType::kF32, 4);
  const Tensor g = Tensor::full({64}, 1.0, DType::kF32);
  const Tensor b = Tensor::zeros({64}, DType::kF32);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(layer_norm(x, g, b));
}
BENCHMARK(BM_LayerNorm);

void BM_Conv2d(benchmark::State& state) {
  const Tensor x = random_tensor({16, 8, 32, 32}, DType::kF32, 5);
  const Tensor w = random_tensor({16, 8 * 9}, DType::kF32, 6);
  const Tensor b = Tensor::zeros({16}, DType::kF32);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, b, 3, 2, 1));
}
BENCHMARK(BM_Conv2d);

void BM_Srcc(benchmark::State& state) {
  Rng rng(7);
  std::vector<double> x(static_cast<std::size_t>(state.range(0))), y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = rng.normal();
    y[i] = x[i] + rng.normal();
  }
  for (auto _ : state) benchmark::DoNotOptimize(srcc(x, y));
}
BENCHMARK(BM_Srcc)->Arg(160)->Arg(10000);

}  // namespace
