// Token generation throughput: full-depth decoding against Top-K early exit,
// with and without the propagating KV cache.
#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "modtune/dataset.hpp"
#include "modtune/inference.hpp"
#include "modtune/mod_head.hpp"
#include "modtune/model.hpp"

using namespace modtune;

namespace {

ModelConfig gen_model_cfg() {
  ModelConfig mc;
  mc.vocab_size = kByteVocabSize;
  mc.d_model = 64;
  mc.n_layers = 4;
  mc.n_heads = 4;
  mc.d_ff = 256;
  mc.max_seq_len = 96;
  mc.seed = 11;
  return mc;
}

std::vector<int32_t> bench_prompt() {
  std::vector<int32_t> p{kBosId};
  for (const char c : std::string("the quick brown fox|")) p.push_back(static_cast<int32_t>(c));
  return p;
}

GenConfig gen_cfg(CacheMode cache) {
  GenConfig g;
  g.mode = GenMode::greedy;
  g.max_new_tokens = 32;
  g.stop_id = -1;  // fixed-length decode for comparable item counts
  g.seed = 1;
  g.cache_mode = cache;
  return g;
}

}  // namespace

static void BM_generate_full(benchmark::State& state) {
  const TransformerModel<float> model = init_model<float>(gen_model_cfg());
  const std::vector<int32_t> prompt = bench_prompt();
  const GenConfig g = gen_cfg(CacheMode::none);
  for (auto _ : state) {
    const GenResult res = generate<float>(model, nullptr, prompt, g);
    benchmark::DoNotOptimize(res.tokens.data());
  }
  state.SetItemsProcessed(state.iterations() * g.max_new_tokens);
}
BENCHMARK(BM_generate_full)->Unit(benchmark::kMillisecond);

static void BM_generate_early_exit(benchmark::State& state) {
  TransformerModel<float> model = init_model<float>(gen_model_cfg());
  ModConfig mc;
  mc.k = 3;
  mc.top_k = 1;
  const ModHead<float> head = init_head(model, mc, 11);
  const std::vector<int32_t> prompt = bench_prompt();
  const GenConfig g = gen_cfg(CacheMode::none);
  for (auto _ : state) {
    const GenResult res = generate_early_exit(model, head, prompt, g);
    benchmark::DoNotOptimize(res.tokens.data());
  }
  state.SetItemsProcessed(state.iterations() * g.max_new_tokens);
}
BENCHMARK(BM_generate_early_exit)->Unit(benchmark::kMillisecond);

static void BM_generate_early_exit_propagate(benchmark::State& state) {
  TransformerModel<float> model = init_model<float>(gen_model_cfg());
  ModConfig mc;
  mc.k = 3;
  mc.top_k = 1;
  const ModHead<float> head = init_head(model, mc, 11);
  const std::vector<int32_t> prompt = bench_prompt();
  const GenConfig g = gen_cfg(CacheMode::propagate);
  for (auto _ : state) {
    const GenResult res = generate_early_exit(model, head, prompt, g);
    benchmark::DoNotOptimize(res.tokens.data());
  }
  state.SetItemsProcessed(state.iterations() * g.max_new_tokens);
}
BENCHMARK(BM_generate_early_exit_propagate)->Unit(benchmark::kMillisecond);
