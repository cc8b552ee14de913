#include <benchmark/benchmark.h>

#include "mlqa/data.hpp"
#include "mlqa/training.hpp"

using namespace mlqa;

namespace {

struct Fixture {
  explicit Fixture(Task task) : model([&] {
    ModelConfig cfg;
    cfg.task = task;
    return cfg;
  }()) {
    dataset = task == Task::kPerceptualQuality ? generate_quality_dataset(16, 1) : generate_correspondence_dataset(16, 1);
    for (std::size_t i = 0; i < 16; ++i) batch_indices.push_back(i);
  }
  QualityModel model;
  Dataset dataset;
  std::vector<std::size_t> batch_indices;
};

void BM_Forward(benchmark::State& state) {
  Fixture f(static_cast<Task>(state.range(0)));
  const Batch batch = make_batch(f.model, f.dataset, f.batch_indices);
  NoGradGuard guard;
  for (auto _ : state) {
    benchmark::DoNotOptimize(f.model.forward(batch.images, batch.prompts ? &*batch.prompts : nullptr));
  }
  state.SetLabel(task_name(f.model.config().task));
}
BENCHMARK(BM_Forward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  Fixture f(static_cast<Task>(state.range(0)));
  const Batch batch = make_batch(f.model, f.dataset, f.batch_indices);
  AdamW optimizer{TrainConfig{}};
  auto& params = f.model.parameters().all();
  for (auto _ : state) {
    f.model.parameters().zero_grad();
    Tensor loss = mse_loss(f.model.forward(batch.images, batch.prompts ? &*batch.prompts : nullptr), batch.labels);
    loss.backward();
    optimizer.step(params);
  }
  state.SetLabel(task_name(f.model.config().task));
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace
