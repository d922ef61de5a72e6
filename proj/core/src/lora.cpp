#include "modtune/lora.hpp"

#include <algorithm>
#include <cmath>

#include "modtune/ops.hpp"

namespace modtune {

const char* lora_target_name(LoraTarget t) {
  switch (t) {
    case LoraTarget::attn_q: return "attn_q";
    case LoraTarget::attn_k: return "attn_k";
    case LoraTarget::attn_v: return "attn_v";
    case LoraTarget::attn_o: return "attn_o";
    case LoraTarget::mlp_in: return "mlp_in";
    case LoraTarget::mlp_out: return "mlp_out";
  }
  return "?";
}

void LoraConfig::validate(const ModelConfig& model_cfg) const {
  if (rank < 1) throw ConfigError("lora.rank must be positive");
  if (rank > model_cfg.d_model) throw ConfigError("lora.rank must be <= d_model");
  if (!(alpha > 0)) throw ConfigError("lora.alpha must be > 0");
  if (target_projections.empty()) throw ConfigError("lora.targets must be non-empty");
  if (!layer_mask.empty() &&
      static_cast<int64_t>(layer_mask.size()) != model_cfg.n_layers) {
    throw ConfigError("lora.layer_mask length must equal n_layers");
  }
}

std::vector<bool> layer_mask_excluding_last(int64_t n_layers, int64_t k) {
  if (k < 0 || k > n_layers) throw ConfigError("layer mask: k outside [0, n]");
  std::vector<bool> mask(static_cast<size_t>(n_layers), true);
  for (int64_t j = n_layers - k; j < n_layers; ++j) mask[static_cast<size_t>(j)] = false;
  return mask;
}

namespace {

template <typename T>
Projection<T>* select_projection(Block<T>& blk, LoraTarget t) {
  switch (t) {
    case LoraTarget::attn_q: return &blk.attn_q;
    case LoraTarget::attn_k: return &blk.attn_k;
    case LoraTarget::attn_v: return &blk.attn_v;
    case LoraTarget::attn_o: return &blk.attn_o;
    case LoraTarget::mlp_in: return &blk.mlp_in;
    case LoraTarget::mlp_out: return &blk.mlp_out;
  }
  return nullptr;
}

}  // namespace

template <typename T>
void inject(TransformerModel<T>& model, const LoraConfig& cfg, uint64_t seed) {
  cfg.validate(model.cfg);
  if (model.has_lora) throw StateError("lora: adapters already injected");
  std::vector<bool> mask =
      cfg.layer_mask.empty() ? std::vector<bool>(model.blocks.size(), true) : cfg.layer_mask;
  Rng rng(derive_seed(seed, "lora-init"));
  // Fixed order (layer-major, then target order as configured) keeps the
  // draw stream deterministic.
  for (size_t j = 0; j < model.blocks.size(); ++j) {
    if (!mask[j]) continue;
    for (LoraTarget t : cfg.target_projections) {
      Projection<T>* proj = select_projection(model.blocks[j], t);
      const int64_t d_in = proj->w.dim(0);
      const int64_t d_out = proj->w.dim(1);
      auto adapter = std::make_shared<LoraAdapter<T>>();
      adapter->A = Tensor<T>::randn({cfg.rank, d_in}, rng, T(0.02));
      adapter->B = Tensor<T>::zeros({d_out, cfg.rank});
      adapter->scaling = static_cast<T>(cfg.alpha / static_cast<double>(cfg.rank));
      proj->lora = std::move(adapter);
    }
  }
  model.has_lora = true;
}

template <typename T>
T merge_check(const TransformerModel<T>& model, int probes, uint64_t seed) {
  if (!model.has_lora) throw StateError("merge_check: no adapters present");
  Rng rng(derive_seed(seed, "merge-probe"));
  T worst = T(0);
  for (auto& blk : model.blocks) {
    const Projection<T>* projs[] = {&blk.attn_q, &blk.attn_k, &blk.attn_v,
                                    &blk.attn_o, &blk.mlp_in, &blk.mlp_out};
    for (const Projection<T>* proj : projs) {
      if (!proj->lora) continue;
      const int64_t d_in = proj->w.dim(0);
      const int64_t d_out = proj->w.dim(1);
      const int64_t r = proj->lora->A.dim(0);
      // Materialize W' = W + scaling·AᵀBᵀ.
      Tensor<T> merged = proj->w.clone();
      auto mv = merged.values();
      auto av = proj->lora->A.values();
      auto bv = proj->lora->B.values();
      for (int64_t i = 0; i < d_in; ++i) {
        for (int64_t o = 0; o < d_out; ++o) {
          T acc = T(0);
          for (int64_t c = 0; c < r; ++c) acc += av[c * d_in + i] * bv[o * r + c];
          mv[i * d_out + o] += proj->lora->scaling * acc;
        }
      }
      for (int p = 0; p < probes; ++p) {
        Tensor<T> x = Tensor<T>::randn({1, d_in}, rng, T(1));
        Tensor<T> want = ops::add_bias(ops::matmul(x, merged), proj->b);
        Tensor<T> got = proj->apply(x);
        auto wv = want.values();
        auto gv = got.values();
        for (size_t i = 0; i < wv.size(); ++i) {
          worst = std::max(worst, std::abs(wv[i] - gv[i]));
        }
      }
    }
  }
  return worst;
}

#define MODTUNE_INSTANTIATE_LORA(T)                                                \
  template struct LoraAdapter<T>;                                                  \
  template void inject(TransformerModel<T>&, const LoraConfig&, uint64_t);         \
  template T merge_check(const TransformerModel<T>&, int, uint64_t);

MODTUNE_INSTANTIATE_LORA(float)
MODTUNE_INSTANTIATE_LORA(double)

#undef MODTUNE_INSTANTIATE_LORA

}  // namespace modtune
