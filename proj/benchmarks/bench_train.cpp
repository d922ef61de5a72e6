// One optimization step — forward, backward, AdamW update — on a small
// byte-level model, for the three tuning modes that matter in practice.
#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "modtune/dataset.hpp"
#include "modtune/lora.hpp"
#include "modtune/mod_head.hpp"
#include "modtune/objectives.hpp"
#include "modtune/optimizer.hpp"
#include "modtune/trainer.hpp"

using namespace modtune;

namespace {

ModelConfig bench_model_cfg() {
  ModelConfig mc;
  mc.vocab_size = kByteVocabSize;
  mc.d_model = 64;
  mc.n_layers = 4;
  mc.n_heads = 4;
  mc.d_ff = 256;
  mc.max_seq_len = 64;
  mc.seed = 7;
  return mc;
}

Batch bench_batch(int64_t batch_size, int64_t seq_len) {
  DatasetSpec spec;
  spec.kind = DatasetKind::synth_copy;
  spec.samples = 64;
  spec.payload_len = 12;
  spec.val_fraction = 0.0;
  spec.seed = 5;
  const Dataset data = build_dataset(spec);
  std::vector<const Example*> rows;
  for (int64_t i = 0; i < batch_size; ++i) rows.push_back(&data.train[static_cast<size_t>(i)]);
  return make_batch(rows, seq_len);
}

template <typename StepFn>
void run_steps(benchmark::State& state, const Batch& batch, StepFn&& one_step) {
  for (auto _ : state) {
    const float loss = one_step();
    benchmark::DoNotOptimize(loss);
  }
  state.SetItemsProcessed(state.iterations() * batch.scored_tokens);  // tokens/s
}

}  // namespace

static void BM_train_step_full(benchmark::State& state) {
  TransformerModel<float> model = init_model<float>(bench_model_cfg());
  const Batch batch = bench_batch(8, 32);
  AdamWConfig oc;
  oc.lr = 1e-3;
  AdamW<float> opt(configure_trainables<float>(model, nullptr, Preset::full_baseline), oc);
  run_steps(state, batch, [&] {
    Tape<float> tape;
    const ForwardTrace<float> trace = forward(model, batch.inputs);
    const Tensor<float> loss = task_loss(final_logits(model, trace), batch.targets, &batch.mask);
    tape.backward(loss);
    opt.step();
    return loss.item();
  });
}
BENCHMARK(BM_train_step_full)->Unit(benchmark::kMillisecond);

static void BM_train_step_mod(benchmark::State& state) {
  TransformerModel<float> model = init_model<float>(bench_model_cfg());
  ModConfig mc;
  mc.k = 3;
  mc.lambda = 1e-4;
  ModHead<float> head = init_head(model, mc, 7);
  const Batch batch = bench_batch(8, 32);
  AdamWConfig oc;
  oc.lr = 1e-3;
  AdamW<float> opt(configure_trainables(model, &head, Preset::mod_only), oc);
  run_steps(state, batch, [&] {
    Tape<float> tape;
    const ForwardTrace<float> trace = forward(model, batch.inputs);
    const EnsembleOutput<float> ens = ensemble(model, head, trace, /*with_probs=*/true);
    const Tensor<float> loss =
        mod_losses(head, ens, batch.targets, &batch.mask, /*route_diagnostics=*/false).total;
    tape.backward(loss);
    opt.step();
    return loss.item();
  });
}
BENCHMARK(BM_train_step_mod)->Unit(benchmark::kMillisecond);

static void BM_train_step_lora(benchmark::State& state) {
  TransformerModel<float> model = init_model<float>(bench_model_cfg());
  LoraConfig lc;
  lc.rank = 8;
  lc.alpha = 16.0;
  inject(model, lc, 7);
  const Batch batch = bench_batch(8, 32);
  AdamWConfig oc;
  oc.lr = 1e-3;
  AdamW<float> opt(configure_trainables<float>(model, nullptr, Preset::lora_all), oc);
  run_steps(state, batch, [&] {
    Tape<float> tape;
    const ForwardTrace<float> trace = forward(model, batch.inputs);
    const Tensor<float> loss = task_loss(final_logits(model, trace), batch.targets, &batch.mask);
    tape.backward(loss);
    opt.step();
    return loss.item();
  });
}
BENCHMARK(BM_train_step_lora)->Unit(benchmark::kMillisecond);
