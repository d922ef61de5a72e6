// Microbenchmarks for the hot tensor ops: GEMM, row softmax, layer norm and
// the cross-entropy loss, forward-only and with a full tape replay.
#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "modtune/common.hpp"
#include "modtune/ops.hpp"
#include "modtune/tensor.hpp"

using namespace modtune;

namespace {

Tensor<float> gauss(std::vector<int64_t> dims, Rng& rng, double stddev = 0.05) {
  return Tensor<float>::randn(std::move(dims), rng, stddev);
}

}  // namespace

static void BM_matmul(benchmark::State& state) {
  const int64_t n = state.range(0);
  Rng rng(1);
  const Tensor<float> a = gauss({n, n}, rng);
  const Tensor<float> w = gauss({n, n}, rng);
  for (auto _ : state) {
    Tensor<float> c = ops::matmul(a, w);
    benchmark::DoNotOptimize(c.values().data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);  // MACs as items
}
BENCHMARK(BM_matmul)->Arg(64)->Arg(128)->Arg(256)->Arg(512);

static void BM_matmul_backward(benchmark::State& state) {
  const int64_t n = state.range(0);
  Rng rng(2);
  Tensor<float> a = gauss({n, n}, rng);
  Tensor<float> w = gauss({n, n}, rng);
  a.set_requires_grad(true);
  w.set_requires_grad(true);
  for (auto _ : state) {
    Tape<float> tape;
    Tensor<float> loss = ops::mean(ops::matmul(a, w));
    tape.backward(loss);
    benchmark::DoNotOptimize(w.grad().data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_matmul_backward)->Arg(64)->Arg(128)->Arg(256);

static void BM_softmax_rows(benchmark::State& state) {
  const int64_t rows = state.range(0);
  const int64_t cols = 259;  // byte-level vocabulary width
  Rng rng(3);
  const Tensor<float> x = gauss({rows, cols}, rng, 1.0);
  for (auto _ : state) {
    Tensor<float> p = ops::softmax(x);
    benchmark::DoNotOptimize(p.values().data());
  }
  state.SetItemsProcessed(state.iterations() * rows * cols);
}
BENCHMARK(BM_softmax_rows)->Arg(64)->Arg(256)->Arg(1024);

static void BM_layer_norm(benchmark::State& state) {
  const int64_t rows = state.range(0);
  const int64_t d = 256;
  Rng rng(4);
  const Tensor<float> x = gauss({rows, d}, rng, 1.0);
  const Tensor<float> gamma = Tensor<float>::full({d}, 1.0f);
  const Tensor<float> beta = Tensor<float>::zeros({d});
  for (auto _ : state) {
    Tensor<float> y = ops::layer_norm(x, gamma, beta, 1e-5f);
    benchmark::DoNotOptimize(y.values().data());
  }
  state.SetItemsProcessed(state.iterations() * rows * d);
}
BENCHMARK(BM_layer_norm)->Arg(64)->Arg(1024);

static void BM_cross_entropy(benchmark::State& state) {
  const int64_t rows = state.range(0);
  const int64_t vocab = 259;
  Rng rng(5);
  const Tensor<float> logits = gauss({rows, vocab}, rng, 1.0);
  std::vector<int32_t> targets;
  targets.reserve(static_cast<size_t>(rows));
  for (int64_t i = 0; i < rows; ++i)
    targets.push_back(static_cast<int32_t>(rng.uniform_int(0, vocab)));
  for (auto _ : state) {
    Tensor<float> loss = ops::cross_entropy(logits, targets, nullptr);
    benchmark::DoNotOptimize(loss.item());
  }
  state.SetItemsProcessed(state.iterations() * rows);
}
BENCHMARK(BM_cross_entropy)->Arg(64)->Arg(1024);

static void BM_gelu(benchmark::State& state) {
  const int64_t n = state.range(0);
  Rng rng(6);
  const Tensor<float> x = gauss({n}, rng, 1.0);
  for (auto _ : state) {
    Tensor<float> y = ops::gelu(x);
    benchmark::DoNotOptimize(y.values().data());
  }
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_gelu)->Arg(1 << 12)->Arg(1 << 16);
