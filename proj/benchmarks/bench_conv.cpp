#include <benchmark/benchmark.h>

#include "ctdense/ops.hpp"
#include "ctdense/rng.hpp"

namespace {

using ctdense::Tensor;

Tensor<float> random_tensor(ctdense::Shape shape, ctdense::Rng& rng) {
  std::vector<float> values(static_cast<std::size_t>(ctdense::shape_numel(shape)));
  for (auto& v : values) v = static_cast<float>(rng.normal());
  return Tensor<float>::from_vector(std::move(shape), std::move(values));
}

// args: channels in, channels out, spatial extent, kernel
void BM_Conv2dForward(benchmark::State& state) {
  const auto cin = state.range(0);
  const auto cout = state.range(1);
  const auto hw = state.range(2);
  const auto k = state.range(3);
  ctdense::Rng rng(1);
  const auto x = random_tensor({8, cin, hw, hw}, rng);
  const auto w = random_tensor({cout, cin, k, k}, rng);
  const ctdense::Conv2dParams p{1, static_cast<int>(k / 2)};
  for (auto _ : state) benchmark::DoNotOptimize(ctdense::conv2d<float>(x, w, std::nullopt, p));
  state.SetItemsProcessed(state.iterations() * 8 * cout * hw * hw * cin * k * k);
}
BENCHMARK(BM_Conv2dForward)->Args({128, 32, 28, 3})->Args({256, 128, 28, 1})->Args({64, 128, 56, 1});

void BM_Conv2dBackward(benchmark::State& state) {
  ctdense::Rng rng(2);
  auto x = random_tensor({8, 128, 28, 28}, rng).set_requires_grad(true);
  auto w = random_tensor({32, 128, 3, 3}, rng).set_requires_grad(true);
  for (auto _ : state) {
    ctdense::Tape<float> tape;
    ctdense::TapeGuard<float> guard(tape);
    auto loss = ctdense::sum(ctdense::conv2d<float>(x, w, std::nullopt, {1, 1}));
    tape.backward(loss);
  }
}
BENCHMARK(BM_Conv2dBackward);

}  // namespace
