#include <benchmark/benchmark.h>

#include "ctdense/densenet.hpp"
#include "ctdense/ops.hpp"

namespace {

void BM_DenseNetForward(benchmark::State& state, ctdense::DenseNetConfig config) {
  auto model = ctdense::DenseNet<float>::build(config, 0);
  const auto n = state.range(0);
  const auto x = ctdense::Tensor<float>::full({n, 1, config.input_size, config.input_size}, 0.5f);
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(x, ctdense::Mode::Eval));
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK_CAPTURE(BM_DenseNetForward, reduced, ctdense::DenseNetConfig::reduced())->Arg(8)->Arg(32);
BENCHMARK_CAPTURE(BM_DenseNetForward, densenet121, ctdense::DenseNetConfig::densenet121())
    ->Arg(1)
    ->Unit(benchmark::kMillisecond);

void BM_ReducedTrainStep(benchmark::State& state) {
  auto config = ctdense::DenseNetConfig::reduced();
  auto model = ctdense::DenseNet<float>::build(config, 0);
  const auto x = ctdense::Tensor<float>::full({8, 1, config.input_size, config.input_size}, 0.5f);
  for (auto _ : state) {
    ctdense::Tape<float> tape;
    ctdense::TapeGuard<float> guard(tape);
    tape.backward(ctdense::sum(model.forward(x, ctdense::Mode::Train)));
    model.zero_grad();
  }
}
BENCHMARK(BM_ReducedTrainStep);

}  // namespace
