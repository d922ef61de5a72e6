#include "modtune/mod_head.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "modtune/ops.hpp"

namespace modtune {

void ModConfig::validate(const ModelConfig& model_cfg) const {
  if (k < 1 || k > model_cfg.n_layers) {
    throw ConfigError("mod.k must be in [1, n_layers], got " + std::to_string(k));
  }
  if (top_k && (*top_k < 1 || *top_k > k)) {
    throw ConfigError("mod.top_k must be in [1, k], got " + std::to_string(*top_k));
  }
  if (lambda < 0) throw ConfigError("mod.lambda must be >= 0");
  if (!(routing_init_std > 0)) throw ConfigError("mod.routing_init_std must be > 0");
  if (!(epsilon_sparsity > 0)) throw ConfigError("mod.epsilon_sparsity must be > 0");
}

template <typename T>
std::vector<NamedParam<T>> ModHead<T>::named_params() const {
  std::vector<NamedParam<T>> out;
  out.push_back({"mod.w_g", w_g, ParamGroup::mod_routing});
  for (size_t i = 0; i < gammas.size(); ++i) {
    const std::string prefix = "mod.norm." + std::to_string(i) + ".";
    out.push_back({prefix + "gamma", gammas[i], ParamGroup::mod_norms});
    out.push_back({prefix + "beta", betas[i], ParamGroup::mod_norms});
  }
  return out;
}

template <typename T>
ModHead<T> init_head(const TransformerModel<T>& model, const ModConfig& cfg, uint64_t seed) {
  cfg.validate(model.cfg);
  ModHead<T> head;
  head.cfg = cfg;
  head.n_layers = model.cfg.n_layers;
  head.d_model = model.cfg.d_model;
  Rng rng(derive_seed(seed, "mod-head-init"));
  head.w_g = Tensor<T>::randn({model.cfg.d_model, cfg.k}, rng, T(cfg.routing_init_std));
  if (cfg.use_trainable_norms) {
    head.gammas.reserve(static_cast<size_t>(cfg.k));
    head.betas.reserve(static_cast<size_t>(cfg.k));
    for (int64_t i = 0; i < cfg.k; ++i) {
      head.gammas.push_back(model.final_gamma.clone());
      head.betas.push_back(model.final_beta.clone());
    }
  }
  return head;
}

template <typename T>
Tensor<T> exit_logits(const TransformerModel<T>& model, const ModHead<T>& head,
                      const ForwardTrace<T>& trace, int64_t i) {
  if (i < 0 || i >= head.cfg.k) {
    throw IndexError("exit_logits: route " + std::to_string(i) + " outside [0, " +
                     std::to_string(head.cfg.k) + ")");
  }
  const int64_t layer = head.route_layer(i);
  if (trace.layers_done() < layer) {
    throw StateError("exit_logits: trace stops at layer " + std::to_string(trace.layers_done()) +
                     ", route needs " + std::to_string(layer));
  }
  const Tensor<T>& h = trace.hiddens[static_cast<size_t>(layer)];
  if (head.cfg.use_trainable_norms) {
    return head_logits(model, h, head.gammas[static_cast<size_t>(i)],
                       head.betas[static_cast<size_t>(i)]);
  }
  return head_logits(model, h, model.final_gamma, model.final_beta);
}

template <typename T>
Tensor<T> route_scores(const ModHead<T>& head, const Tensor<T>& x) {
  if (x.rank() < 1 || x.dims().back() != head.d_model) {
    throw ShapeError("route_scores: input last dim must be d_model");
  }
  return ops::matmul(x, head.w_g);
}

template <typename T>
Tensor<T> route_dense(const ModHead<T>& head, const Tensor<T>& x) {
  return ops::softmax(route_scores(head, x));
}

template <typename T>
std::vector<int> route_tiebreak(std::span<const T> scores, int64_t K) {
  const int64_t k = static_cast<int64_t>(scores.size());
  if (K < 1 || K > k) throw ValidationError("route_tiebreak: K outside [1, k]");
  std::vector<int> idx(static_cast<size_t>(k));
  std::iota(idx.begin(), idx.end(), 0);
  // Descending score; equal scores favor the deeper route.
  std::sort(idx.begin(), idx.end(), [&scores](int a, int b) {
    if (scores[static_cast<size_t>(a)] != scores[static_cast<size_t>(b)]) {
      return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
    }
    return a > b;
  });
  idx.resize(static_cast<size_t>(K));
  std::sort(idx.begin(), idx.end());
  return idx;
}

namespace {

// Keeps masked-in entries, sets the rest to -inf so the downstream softmax
// excludes them from the normalizer and hands them exactly zero gradient.
template <typename T>
Tensor<T> mask_scores(const Tensor<T>& scores, const std::vector<uint8_t>& keep) {
  Tensor<T> out = Tensor<T>::zeros(scores.dims());
  auto sv = scores.values();
  auto ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) {
    ov[i] = keep[i] ? sv[i] : -std::numeric_limits<T>::infinity();
  }
  if (Tape<T>::current() && scores.needs_grad()) {
    out.set_requires_grad(true);
    Tape<T>::current()->record({scores, out}, [scores = scores, out, keep]() mutable {
      auto go = out.grad();
      auto gs = scores.grad();
      for (size_t i = 0; i < go.size(); ++i) {
        if (keep[i]) gs[i] += go[i];
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> route_topk(const ModHead<T>& head, const Tensor<T>& x, int64_t K) {
  if (K < 1 || K > head.cfg.k) throw ValidationError("route_topk: K outside [1, k]");
  if (K == head.cfg.k) return route_dense(head, x);  // bitwise-equal fast path
  Tensor<T> scores = route_scores(head, x);
  const int64_t k = head.cfg.k;
  const int64_t rows = scores.numel() / k;
  std::vector<uint8_t> keep(static_cast<size_t>(scores.numel()), 0);
  auto sv = scores.values();
  for (int64_t r = 0; r < rows; ++r) {
    std::span<const T> row(sv.data() + r * k, static_cast<size_t>(k));
    for (int sel : route_tiebreak(row, K)) keep[static_cast<size_t>(r * k + sel)] = 1;
  }
  return ops::softmax(mask_scores(scores, keep));
}

template <typename T>
EnsembleOutput<T> ensemble(const TransformerModel<T>& model, const ModHead<T>& head,
                           const ForwardTrace<T>& trace, bool with_probs) {
  if (trace.layers_done() != model.cfg.n_layers) {
    throw StateError("ensemble: trace must reach the final layer");
  }
  EnsembleOutput<T> out;
  const Tensor<T>& x = trace.hiddens[static_cast<size_t>(head.routing_input_layer())];
  out.weights = head.cfg.top_k ? route_topk(head, x, *head.cfg.top_k) : route_dense(head, x);
  out.route_logits.reserve(static_cast<size_t>(head.cfg.k));
  for (int64_t i = 0; i < head.cfg.k; ++i) {
    out.route_logits.push_back(exit_logits(model, head, trace, i));
  }
  if (with_probs) {
    out.route_probs.reserve(out.route_logits.size());
    for (const auto& l : out.route_logits) out.route_probs.push_back(ops::softmax(l));
  }
  out.ensemble_logits = ops::ensemble_mix(out.route_logits, out.weights);
  return out;
}

#define MODTUNE_INSTANTIATE_MOD(T)                                                         \
  template struct ModHead<T>;                                                              \
  template struct EnsembleOutput<T>;                                                       \
  template ModHead<T> init_head(const TransformerModel<T>&, const ModConfig&, uint64_t);   \
  template Tensor<T> exit_logits(const TransformerModel<T>&, const ModHead<T>&,            \
                                 const ForwardTrace<T>&, int64_t);                         \
  template Tensor<T> route_scores(const ModHead<T>&, const Tensor<T>&);                    \
  template Tensor<T> route_dense(const ModHead<T>&, const Tensor<T>&);                     \
  template Tensor<T> route_topk(const ModHead<T>&, const Tensor<T>&, int64_t);             \
  template std::vector<int> route_tiebreak(std::span<const T>, int64_t);                   \
  template EnsembleOutput<T> ensemble(const TransformerModel<T>&, const ModHead<T>&,       \
                                      const ForwardTrace<T>&, bool);

MODTUNE_INSTANTIATE_MOD(float)
MODTUNE_INSTANTIATE_MOD(double)

#undef MODTUNE_INSTANTIATE_MOD

}  // namespace modtune
