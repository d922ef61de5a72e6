#include "modtune/model.hpp"

#include <cmath>
#include <numeric>

#include "modtune/lora.hpp"
#include "modtune/ops.hpp"

namespace modtune {

void ModelConfig::validate() const {
  if (vocab_size < 1) throw ConfigError("model.vocab_size must be positive");
  if (d_model < 1) throw ConfigError("model.d_model must be positive");
  if (n_layers < 1) throw ConfigError("model.n_layers must be >= 1");
  if (n_heads < 1) throw ConfigError("model.n_heads must be positive");
  if (d_model % n_heads != 0) throw ConfigError("model.d_model must be divisible by n_heads");
  if (d_ff < 1) throw ConfigError("model.d_ff must be positive");
  if (max_seq_len < 2) throw ConfigError("model.max_seq_len must be >= 2");
  if (!(norm_eps > 0)) throw ConfigError("model.norm_eps must be > 0");
}

const char* param_group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::base: return "base";
    case ParamGroup::lora: return "lora";
    case ParamGroup::mod_routing: return "mod_routing";
    case ParamGroup::mod_norms: return "mod_norms";
  }
  return "?";
}

template <typename T>
Tensor<T> Projection<T>::apply(const Tensor<T>& x) const {
  Tensor<T> y = ops::add_bias(ops::matmul(x, w), b);
  if (lora) {
    Tensor<T> low = ops::matmul_t(ops::matmul_t(x, lora->A), lora->B);
    y = ops::add(y, ops::scale(low, lora->scaling));
  }
  return y;
}

namespace {

constexpr double kInitStd = 0.02;

template <typename T>
Projection<T> init_projection(int64_t d_in, int64_t d_out, Rng& rng) {
  Projection<T> p;
  p.w = Tensor<T>::randn({d_in, d_out}, rng, T(kInitStd));
  p.b = Tensor<T>::zeros({d_out});
  return p;
}

}  // namespace

template <typename T>
TransformerModel<T> init_model(const ModelConfig& cfg) {
  cfg.validate();
  TransformerModel<T> m;
  m.cfg = cfg;
  // One stream, fixed draw order: embeddings, then per block the six
  // projection matrices, then the untied head. Biases/betas are zeros and
  // gammas ones — no draws, so the stream stays stable across configs.
  Rng rng(derive_seed(cfg.seed, "model-init"));
  m.tok_emb = Tensor<T>::randn({cfg.vocab_size, cfg.d_model}, rng, T(kInitStd));
  m.pos_emb = Tensor<T>::randn({cfg.max_seq_len, cfg.d_model}, rng, T(kInitStd));
  m.blocks.resize(static_cast<size_t>(cfg.n_layers));
  for (auto& blk : m.blocks) {
    blk.ln1_gamma = Tensor<T>::full({cfg.d_model}, T(1));
    blk.ln1_beta = Tensor<T>::zeros({cfg.d_model});
    blk.attn_q = init_projection<T>(cfg.d_model, cfg.d_model, rng);
    blk.attn_k = init_projection<T>(cfg.d_model, cfg.d_model, rng);
    blk.attn_v = init_projection<T>(cfg.d_model, cfg.d_model, rng);
    blk.attn_o = init_projection<T>(cfg.d_model, cfg.d_model, rng);
    blk.ln2_gamma = Tensor<T>::full({cfg.d_model}, T(1));
    blk.ln2_beta = Tensor<T>::zeros({cfg.d_model});
    blk.mlp_in = init_projection<T>(cfg.d_model, cfg.d_ff, rng);
    blk.mlp_out = init_projection<T>(cfg.d_ff, cfg.d_model, rng);
  }
  m.final_gamma = Tensor<T>::full({cfg.d_model}, T(1));
  m.final_beta = Tensor<T>::zeros({cfg.d_model});
  if (cfg.tie_embeddings) {
    m.lm_w = m.tok_emb;  // shared storage
  } else {
    m.lm_w = Tensor<T>::randn({cfg.vocab_size, cfg.d_model}, rng, T(kInitStd));
  }
  m.lm_b = Tensor<T>::zeros({cfg.vocab_size});
  return m;
}

template <typename T>
std::vector<NamedParam<T>> TransformerModel<T>::named_params() const {
  std::vector<NamedParam<T>> out;
  auto base = [&out](std::string name, const Tensor<T>& t) {
    out.push_back({std::move(name), t, ParamGroup::base});
  };
  base("base.tok_emb", tok_emb);
  base("base.pos_emb", pos_emb);
  for (size_t j = 0; j < blocks.size(); ++j) {
    const Block<T>& blk = blocks[j];
    const std::string prefix = "base.layer." + std::to_string(j + 1) + ".";
    base(prefix + "ln1.gamma", blk.ln1_gamma);
    base(prefix + "ln1.beta", blk.ln1_beta);
    const std::pair<const char*, const Projection<T>*> projs[] = {
        {"attn_q", &blk.attn_q}, {"attn_k", &blk.attn_k},   {"attn_v", &blk.attn_v},
        {"attn_o", &blk.attn_o}, {"mlp_in", &blk.mlp_in}, {"mlp_out", &blk.mlp_out}};
    for (auto [pname, proj] : projs) {
      base(prefix + pname + ".w", proj->w);
      base(prefix + pname + ".b", proj->b);
    }
    base(prefix + "ln2.gamma", blk.ln2_gamma);
    base(prefix + "ln2.beta", blk.ln2_beta);
  }
  if (!cfg.tie_embeddings) base("base.lm_head.w", lm_w);
  base("base.lm_head.b", lm_b);
  // final_norm last: in the k=1 reduction run its zero grads sit directly
  // before the route norm that stands in for it, so the grad-clip norm
  // accumulates the same value chain bitwise as the no-head baseline.
  base("base.final_norm.gamma", final_gamma);
  base("base.final_norm.beta", final_beta);
  // Adapters after all base params, in layer-then-target order.
  for (size_t j = 0; j < blocks.size(); ++j) {
    const Block<T>& blk = blocks[j];
    const std::pair<const char*, const Projection<T>*> projs[] = {
        {"attn_q", &blk.attn_q}, {"attn_k", &blk.attn_k},   {"attn_v", &blk.attn_v},
        {"attn_o", &blk.attn_o}, {"mlp_in", &blk.mlp_in}, {"mlp_out", &blk.mlp_out}};
    for (auto [pname, proj] : projs) {
      if (!proj->lora) continue;
      const std::string prefix = "lora." + std::to_string(j + 1) + "." + pname + ".";
      out.push_back({prefix + "A", proj->lora->A, ParamGroup::lora});
      out.push_back({prefix + "B", proj->lora->B, ParamGroup::lora});
    }
  }
  return out;
}

namespace {

template <typename T>
Tensor<T> block_forward(const Block<T>& blk, const Tensor<T>& x, const ModelConfig& cfg) {
  const int64_t b = x.dim(0), s = x.dim(1), d = cfg.d_model;
  const int64_t nh = cfg.n_heads, hd = d / nh;
  Tensor<T> h = ops::layer_norm(x, blk.ln1_gamma, blk.ln1_beta, T(cfg.norm_eps));
  auto split_heads = [&](const Tensor<T>& t) {
    return ops::permute(ops::reshape(t, {b, s, nh, hd}), {0, 2, 1, 3});  // [b, nh, s, hd]
  };
  Tensor<T> q = split_heads(blk.attn_q.apply(h));
  Tensor<T> k = split_heads(blk.attn_k.apply(h));
  Tensor<T> v = split_heads(blk.attn_v.apply(h));
  Tensor<T> scores = ops::scale(ops::bmm_t(q, k), T(1) / std::sqrt(static_cast<T>(hd)));
  Tensor<T> probs = ops::softmax(ops::apply_causal_mask(scores));
  Tensor<T> ctx = ops::reshape(ops::permute(ops::bmm(probs, v), {0, 2, 1, 3}), {b, s, d});
  Tensor<T> x1 = ops::add(x, blk.attn_o.apply(ctx));
  Tensor<T> h2 = ops::layer_norm(x1, blk.ln2_gamma, blk.ln2_beta, T(cfg.norm_eps));
  Tensor<T> mlp = blk.mlp_out.apply(ops::gelu(blk.mlp_in.apply(h2)));
  return ops::add(x1, mlp);
}

}  // namespace

template <typename T>
ForwardTrace<T> forward_partial(const TransformerModel<T>& model, const Tokens& tokens,
                                int64_t upto) {
  const ModelConfig& cfg = model.cfg;
  if (upto < 0 || upto > cfg.n_layers) {
    throw ValidationError("forward: layer bound " + std::to_string(upto) + " outside [0, " +
                          std::to_string(cfg.n_layers) + "]");
  }
  if (tokens.rows < 1 || tokens.cols < 1) throw ValidationError("forward: empty token batch");
  if (tokens.cols > cfg.max_seq_len) {
    throw ValidationError("forward: sequence length " + std::to_string(tokens.cols) +
                          " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  Tokens positions;
  positions.rows = tokens.rows;
  positions.cols = tokens.cols;
  positions.ids.resize(tokens.ids.size());
  for (int64_t r = 0; r < tokens.rows; ++r) {
    for (int64_t c = 0; c < tokens.cols; ++c) {
      positions.ids[static_cast<size_t>(r * tokens.cols + c)] = static_cast<int32_t>(c);
    }
  }
  ForwardTrace<T> trace;
  trace.hiddens.reserve(static_cast<size_t>(cfg.n_layers) + 1);
  trace.hiddens.push_back(
      ops::add(ops::embedding(model.tok_emb, tokens), ops::embedding(model.pos_emb, positions)));
  forward_extend(model, trace, upto);
  return trace;
}

template <typename T>
void forward_extend(const TransformerModel<T>& model, ForwardTrace<T>& trace, int64_t upto) {
  if (trace.hiddens.empty()) throw StateError("forward_extend: empty trace");
  if (upto > model.cfg.n_layers) throw ValidationError("forward_extend: layer bound beyond n");
  for (int64_t j = trace.layers_done(); j < upto; ++j) {
    trace.hiddens.push_back(
        block_forward(model.blocks[static_cast<size_t>(j)], trace.hiddens.back(), model.cfg));
  }
}

template <typename T>
ForwardTrace<T> forward(const TransformerModel<T>& model, const Tokens& tokens) {
  return forward_partial(model, tokens, model.cfg.n_layers);
}

template <typename T>
Tensor<T> head_logits(const TransformerModel<T>& model, const Tensor<T>& h,
                      const Tensor<T>& gamma, const Tensor<T>& beta) {
  Tensor<T> normed = ops::layer_norm(h, gamma, beta, T(model.cfg.norm_eps));
  return ops::add_bias(ops::matmul_t(normed, model.lm_w), model.lm_b);
}

template <typename T>
Tensor<T> final_logits(const TransformerModel<T>& model, const ForwardTrace<T>& trace) {
  if (trace.layers_done() != model.cfg.n_layers) {
    throw StateError("final_logits: trace incomplete (has " +
                     std::to_string(trace.layers_done()) + " of " +
                     std::to_string(model.cfg.n_layers) + " layers)");
  }
  return head_logits(model, trace.hiddens.back(), model.final_gamma, model.final_beta);
}

template <typename T>
int64_t count_params(const std::vector<NamedParam<T>>& params, bool trainable_only,
                     std::optional<ParamGroup> filter) {
  int64_t total = 0;
  for (const auto& p : params) {
    if (filter && p.group != *filter) continue;
    if (trainable_only && !p.tensor.needs_grad()) continue;
    total += p.tensor.numel();
  }
  return total;
}

template struct TransformerModel<float>;
template struct TransformerModel<double>;
template struct Projection<float>;
template struct Projection<double>;

#define MODTUNE_INSTANTIATE_MODEL(T)                                                      \
  template TransformerModel<T> init_model<T>(const ModelConfig&);                         \
  template ForwardTrace<T> forward(const TransformerModel<T>&, const Tokens&);            \
  template ForwardTrace<T> forward_partial(const TransformerModel<T>&, const Tokens&,     \
                                           int64_t);                                     \
  template void forward_extend(const TransformerModel<T>&, ForwardTrace<T>&, int64_t);    \
  template Tensor<T> final_logits(const TransformerModel<T>&, const ForwardTrace<T>&);    \
  template Tensor<T> head_logits(const TransformerModel<T>&, const Tensor<T>&,            \
                                 const Tensor<T>&, const Tensor<T>&);                     \
  template int64_t count_params(const std::vector<NamedParam<T>>&, bool,                  \
                                std::optional<ParamGroup>);

MODTUNE_INSTANTIATE_MODEL(float)
MODTUNE_INSTANTIATE_MODEL(double)

#undef MODTUNE_INSTANTIATE_MODEL

}  // namespace modtune
