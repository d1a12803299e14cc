#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "qvit/gemm.hpp"
#include "qvit/quant.hpp"

using namespace qvit;

namespace {

std::vector<float> noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d;
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

void BM_GemmFloat(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = noise(n * n, 1), b = noise(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    kernels::gemm(false, false, n, n, n, a.data(), b.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * std::int64_t(n * n * n));
}
BENCHMARK(BM_GemmFloat)->Arg(64)->Arg(128)->Arg(256);

void BM_GemmInt(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::int32_t> code(-2, 1);
  std::vector<std::int32_t> a(n * n), b(n * n);
  for (auto& v : a) v = code(rng);
  for (auto& v : b) v = code(rng);
  std::vector<std::int64_t> c(n * n);
  for (auto _ : state) {
    kernels::gemm_int(n, n, n, a.data(), b.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * std::int64_t(n * n * n));
}
BENCHMARK(BM_GemmInt)->Arg(64)->Arg(128)->Arg(256);

// Q-Linear at the tiny model's MLP shape: 17 tokens x 64 -> 256.
void qlinear_bench(benchmark::State& state, bool integer) {
  const int bits = static_cast<int>(state.range(0));
  const Tensor x = Tensor::from({32, 17, 64}, noise(32 * 17 * 64, 4));
  const Tensor w = Tensor::from({256, 64}, noise(256 * 64, 5));
  const QuantizerConfig cx{bits, QuantKind::ActivationAsymmetric, ScaleMode::StaticEma};
  const QuantizerConfig cw{bits, QuantKind::WeightSymmetric, ScaleMode::StaticEma};
  const auto sx = update_scale_statistics(make_quantizer_state(cx), x, cx);
  const auto sw = update_scale_statistics(make_quantizer_state(cw), w, cw);
  for (auto _ : state) {
    const Tensor y = integer ? qlinear_forward_integer(x, w, sx, sw) : qlinear_forward(x, w, sx, sw);
    benchmark::DoNotOptimize(y.data().data());
  }
}
void BM_QLinearFloatPath(benchmark::State& s) { qlinear_bench(s, false); }
void BM_QLinearIntegerPath(benchmark::State& s) { qlinear_bench(s, true); }
BENCHMARK(BM_QLinearFloatPath)->Arg(2)->Arg(4)->Arg(8);
BENCHMARK(BM_QLinearIntegerPath)->Arg(2)->Arg(4)->Arg(8);

void BM_FakeQuant(benchmark::State& state) {
  const Tensor x = Tensor::from({1 << 16}, noise(1 << 16, 6));
  const QuantizerConfig cfg{4, QuantKind::ActivationAsymmetric, ScaleMode::StaticEma};
  const auto s = update_scale_statistics(make_quantizer_state(cfg), x, cfg);
  for (auto _ : state) {
    const Tensor y = fake_quant(x, s, cfg);
    benchmark::DoNotOptimize(y.data().data());
  }
  state.SetItemsProcessed(state.iterations() * (1 << 16));
}
BENCHMARK(BM_FakeQuant);

}  // namespace
