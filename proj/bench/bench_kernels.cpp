// OpenMP kernels against the serial reference kernels, on the mini-detector's layer shapes.
#include <benchmark/benchmark.h>

#include <vector>

#include "maskstrike/rng.hpp"
#include "maskstrike/kernels.hpp"

namespace {

using namespace maskstrike;
using kernels::ConvShape;
using kernels::Tensor;

struct ConvCase {
  ConvShape shape;
  Tensor input;
  std::vector<double> weight, bias;
};

std::vector<double> random_values(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

// Backbone layers at a 128-pixel input: 3->8 s2, 8->16 s2, 16->32 s2, 32->32 s1.
ConvCase conv_case(int layer) {
  static const int in_c[] = {3, 8, 16, 32}, out_c[] = {8, 16, 32, 32}, stride[] = {2, 2, 2, 1},
                   extent[] = {128, 64, 32, 16};
  Rng rng(99 + layer);
  ConvCase c;
  c.shape = ConvShape{in_c[layer], out_c[layer], 3, stride[layer], 1};
  c.input = Tensor(in_c[layer], extent[layer], extent[layer]);
  c.input.data = random_values(c.input.size(), rng);
  c.weight = random_values(c.shape.weight_count(), rng);
  c.bias = random_values(out_c[layer], rng);
  return c;
}

void BM_conv_forward(benchmark::State& state) {
  const ConvCase c = conv_case(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(kernels::conv2d_forward(c.input, c.shape, c.weight, c.bias));
}

void BM_conv_forward_reference(benchmark::State& state) {
  const ConvCase c = conv_case(static_cast<int>(state.range(0)));
  for (auto _ : state)
    benchmark::DoNotOptimize(kernels::reference::conv2d_forward(c.input, c.shape, c.weight, c.bias));
}

void BM_conv_backward_input(benchmark::State& state) {
  const ConvCase c = conv_case(static_cast<int>(state.range(0)));
  const Tensor g = kernels::conv2d_forward(c.input, c.shape, c.weight, c.bias);
  for (auto _ : state)
    benchmark::DoNotOptimize(
        kernels::conv2d_backward_input(g, c.shape, c.weight, c.input.height, c.input.width));
}

void BM_conv_backward_input_reference(benchmark::State& state) {
  const ConvCase c = conv_case(static_cast<int>(state.range(0)));
  const Tensor g = kernels::conv2d_forward(c.input, c.shape, c.weight, c.bias);
  for (auto _ : state)
    benchmark::DoNotOptimize(
        kernels::reference::conv2d_backward_input(g, c.shape, c.weight, c.input.height, c.input.width));
}

void BM_conv_backward_params(benchmark::State& state) {
  const ConvCase c = conv_case(static_cast<int>(state.range(0)));
  const Tensor g = kernels::conv2d_forward(c.input, c.shape, c.weight, c.bias);
  std::vector<double> gw(c.weight.size()), gb(c.bias.size());
  for (auto _ : state) {
    kernels::conv2d_backward_params(c.input, g, c.shape, gw, gb);
    benchmark::DoNotOptimize(gw.data());
  }
}

void BM_conv_backward_params_reference(benchmark::State& state) {
  const ConvCase c = conv_case(static_cast<int>(state.range(0)));
  const Tensor g = kernels::conv2d_forward(c.input, c.shape, c.weight, c.bias);
  std::vector<double> gw(c.weight.size()), gb(c.bias.size());
  for (auto _ : state) {
    kernels::reference::conv2d_backward_params(c.input, g, c.shape, gw, gb);
    benchmark::DoNotOptimize(gw.data());
  }
}

// Classifier dense layer: 512 -> 64.
struct LinearCase {
  std::vector<double> input, weight, bias;
};

LinearCase linear_case() {
  Rng rng(7);
  return {random_values(512, rng), random_values(512 * 64, rng), random_values(64, rng)};
}

void BM_linear_forward(benchmark::State& state) {
  const LinearCase c = linear_case();
  for (auto _ : state) benchmark::DoNotOptimize(kernels::linear_forward(c.input, c.weight, c.bias, 64));
}

void BM_linear_forward_reference(benchmark::State& state) {
  const LinearCase c = linear_case();
  for (auto _ : state)
    benchmark::DoNotOptimize(kernels::reference::linear_forward(c.input, c.weight, c.bias, 64));
}

}  // namespace

BENCHMARK(BM_conv_forward)->DenseRange(0, 3);
BENCHMARK(BM_conv_forward_reference)->DenseRange(0, 3);
BENCHMARK(BM_conv_backward_input)->DenseRange(0, 3);
BENCHMARK(BM_conv_backward_input_reference)->DenseRange(0, 3);
BENCHMARK(BM_conv_backward_params)->DenseRange(0, 3);
BENCHMARK(BM_conv_backward_params_reference)->DenseRange(0, 3);
BENCHMARK(BM_linear_forward);
BENCHMARK(BM_linear_forward_reference);

BENCHMARK_MAIN();
