#pragma once

#include <optional>
#include <span>
#include <vector>

#include "modtune/common.hpp"
#include "modtune/model.hpp"
#include "modtune/tensor.hpp"

namespace modtune {

struct ModConfig {
  int64_t k = 3;
  std::optional<int64_t> top_k;  // absent = dense routing
  double lambda = 1e-4;
  double routing_init_std = 0.02;
  bool use_trainable_norms = true;  // false = frozen-final-norm ablation
  bool detach_teacher = true;
  double epsilon_sparsity = 1e-5;

  void validate(const ModelConfig& model_cfg) const;
};

// Ensemble head over the last k layers. Route i reads layer n-k+1+i, so
// route k-1 is the final layer; routing input is H_{n-k}, the output of
// the layer just before the ensembled range.
template <typename T>
struct ModHead {
  ModConfig cfg;
  int64_t n_layers = 0;
  int64_t d_model = 0;
  Tensor<T> w_g;                         // [d x k]
  std::vector<Tensor<T>> gammas, betas;  // k trainable norms (empty in ablation)

  int64_t route_layer(int64_t i) const { return n_layers - cfg.k + 1 + i; }
  int64_t routing_input_layer() const { return n_layers - cfg.k; }

  // w_g first, then norm pairs in route order (grad-clip chain contract,
  // see TransformerModel::named_params).
  std::vector<NamedParam<T>> named_params() const;
};

// W_g ~ N(0, routing_init_std); route norms copy the model's current N_p,
// so at creation time exit_logits(k-1) is bitwise final_logits.
template <typename T>
ModHead<T> init_head(const TransformerModel<T>& model, const ModConfig& cfg, uint64_t seed);

// phi(N_i(H_{route_layer(i)})); the frozen-norm ablation substitutes N_p.
template <typename T>
Tensor<T> exit_logits(const TransformerModel<T>& model, const ModHead<T>& head,
                      const ForwardTrace<T>& trace, int64_t i);

// x·W_g for x [... x d] — the pre-softmax route scores.
template <typename T>
Tensor<T> route_scores(const ModHead<T>& head, const Tensor<T>& x);

// Softmax(x·W_g) per token.
template <typename T>
Tensor<T> route_dense(const ModHead<T>& head, const Tensor<T>& x);

// Softmax over each token's top-K scores; unselected entries are exactly 0
// and receive exactly zero gradient. K == k short-circuits to route_dense.
template <typename T>
Tensor<T> route_topk(const ModHead<T>& head, const Tensor<T>& x, int64_t K);

// Selected route indices (ascending) for one score row; ties break toward
// the deeper route (higher index).
template <typename T>
std::vector<int> route_tiebreak(std::span<const T> scores, int64_t K);

template <typename T>
struct EnsembleOutput {
  std::vector<Tensor<T>> route_logits;  // k of [batch x seq x V]
  std::vector<Tensor<T>> route_probs;   // softmax(route_logits); empty unless requested
  Tensor<T> weights;                    // [batch x seq x k]
  Tensor<T> ensemble_logits;            // [batch x seq x V]
};

// Full ensemble over a complete trace. with_probs controls whether the
// per-route softmax distributions are materialized (the distillation path
// needs them; a lambda=0 run must not build them at all).
template <typename T>
EnsembleOutput<T> ensemble(const TransformerModel<T>& model, const ModHead<T>& head,
                           const ForwardTrace<T>& trace, bool with_probs = true);

}  // namespace modtune
