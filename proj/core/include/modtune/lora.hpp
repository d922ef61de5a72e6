#pragma once

#include <string>
#include <vector>

#include "modtune/common.hpp"
#include "modtune/model.hpp"
#include "modtune/tensor.hpp"

namespace modtune {

enum class LoraTarget { attn_q, attn_k, attn_v, attn_o, mlp_in, mlp_out };

const char* lora_target_name(LoraTarget t);

struct LoraConfig {
  int64_t rank = 8;
  double alpha = 16.0;
  std::vector<LoraTarget> target_projections = {LoraTarget::attn_q, LoraTarget::attn_v,
                                                LoraTarget::mlp_out};
  // true = adapt layer j+1; length must equal n_layers. Empty = all true.
  std::vector<bool> layer_mask;

  void validate(const ModelConfig& model_cfg) const;
};

// y = x·W + b + (alpha/r)·(x·Aᵀ)·Bᵀ. B starts at zero so the adapted map
// equals the base map exactly at injection time.
template <typename T>
struct LoraAdapter {
  Tensor<T> A;  // [r x d_in]
  Tensor<T> B;  // [d_out x r]
  T scaling;    // alpha / r
};

// Mask excluding the last k layers (the LoRA_¬K baseline shape).
std::vector<bool> layer_mask_excluding_last(int64_t n_layers, int64_t k);

// Attaches adapters to the masked layers' selected projections. A drawn
// Gaussian std 0.02 from derive_seed(seed, "lora"), B zero. StateError on
// double injection.
template <typename T>
void inject(TransformerModel<T>& model, const LoraConfig& cfg, uint64_t seed);

// Max |merged(x) − adapted(x)| over `probes` random inputs, where merged
// applies the explicitly materialized single matrix W + (alpha/r)·AᵀBᵀ.
// Regression guard: must stay ≤ 1e-5 in 32-bit.
template <typename T>
T merge_check(const TransformerModel<T>& model, int probes, uint64_t seed);

}  // namespace modtune
