#include <benchmark/benchmark.h>

#include <random>

#include "qvit/distill.hpp"
#include "qvit/model.hpp"
#include "qvit/ops.hpp"

using namespace qvit;

namespace {

Tensor batch(std::size_t b) {
  std::mt19937_64 rng(7);
  std::normal_distribution<float> d;
  std::vector<float> v(b * 32 * 32);
  for (auto& x : v) x = d(rng);
  return Tensor::from({b, 32, 32, 1}, std::move(v));
}

ModelConfig tiny(int bits, bool irm) {
  ModelConfig c;
  c.w_bits = c.a_bits = bits;
  c.irm_enabled = irm;
  return c;
}

void BM_TinyForward(benchmark::State& state) {
  QViT m(tiny(int(state.range(0)), state.range(0) < 32), 1);
  const Tensor x = batch(32);
  m.forward(x, true, false);
  NoGradGuard no_grad;
  for (auto _ : state) {
    auto out = m.forward(x, false, false);
    benchmark::DoNotOptimize(out.logits.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_TinyForward)->Arg(32)->Arg(4)->Arg(2)->Unit(benchmark::kMillisecond);

// One student training step without the optimizer: forward with telemetry,
// total loss against a float teacher, backward.
void BM_TinyStudentStep(benchmark::State& state) {
  QViT teacher(tiny(32, false), 2);
  QViT student(tiny(int(state.range(0)), true), 3);
  const Tensor x = batch(32);
  std::vector<int> labels(32);
  for (int i = 0; i < 32; ++i) labels[i] = i % 4;
  const TeacherOutputs t = teacher_outputs(teacher, x);
  student.forward(x, true, false);
  DistillationConfig cfg;
  cfg.lambda_dgd = 0.03f;
  for (auto _ : state) {
    const auto out = student.forward(x, true, true);
    const auto loss = total_loss(out.logits, labels, t, out.telemetry, cfg);
    const GradientMap g = backward(loss.total);
    benchmark::DoNotOptimize(&g);
  }
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_TinyStudentStep)->Arg(4)->Arg(2)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
