#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "modtune/common.hpp"
#include "modtune/tensor.hpp"

namespace modtune {

template <typename T>
struct LoraAdapter;  // defined in lora.hpp

struct ModelConfig {
  int64_t vocab_size = 259;  // 256 bytes + BOS/EOS/PAD
  int64_t d_model = 128;
  int64_t n_layers = 8;
  int64_t n_heads = 4;
  int64_t d_ff = 512;
  int64_t max_seq_len = 256;
  double norm_eps = 1e-5;
  bool tie_embeddings = true;
  uint64_t seed = 0;

  void validate() const;  // ConfigError on violation
};

enum class ParamGroup { base, lora, mod_routing, mod_norms };

const char* param_group_name(ParamGroup g);

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  ParamGroup group;
};

// Linear map y = x·W + b with an optional low-rank adapter. W is stored
// [d_in x d_out] so it composes directly with ops::matmul on row-major
// activations.
template <typename T>
struct Projection {
  Tensor<T> w;
  Tensor<T> b;
  std::shared_ptr<LoraAdapter<T>> lora;

  Tensor<T> apply(const Tensor<T>& x) const;
};

template <typename T>
struct Block {
  Tensor<T> ln1_gamma, ln1_beta;
  Projection<T> attn_q, attn_k, attn_v, attn_o;
  Tensor<T> ln2_gamma, ln2_beta;
  Projection<T> mlp_in, mlp_out;
};

// Records H_0 (embedded input) through H_j for every computed layer j.
// hiddens[j] is layer j's post-residual output, so hiddens.size() == j+1
// after computing through layer j; a complete trace holds n+1 states.
template <typename T>
struct ForwardTrace {
  std::vector<Tensor<T>> hiddens;

  int64_t layers_done() const { return static_cast<int64_t>(hiddens.size()) - 1; }
};

// Pre-norm decoder-only transformer. Blocks are 1-indexed in names and
// docs (L_1..L_n) to match the H_j trace indexing; blocks[j] is L_{j+1}.
template <typename T>
struct TransformerModel {
  ModelConfig cfg;
  Tensor<T> tok_emb;  // [V x d]
  Tensor<T> pos_emb;  // [max_seq_len x d]
  std::vector<Block<T>> blocks;
  Tensor<T> final_gamma, final_beta;  // pretrained-style norm before the head
  Tensor<T> lm_w;  // [V x d], applied transposed; aliases tok_emb when tied
  Tensor<T> lm_b;  // [V]
  bool has_lora = false;

  // Stable enumeration order; the tied head weight is listed once (as
  // base.tok_emb). Includes adapter params after injection.
  std::vector<NamedParam<T>> named_params() const;
};

template <typename T>
TransformerModel<T> init_model(const ModelConfig& cfg);

// Full forward: H_0..H_n. Throws ValidationError for over-long sequences,
// IndexError for out-of-range token ids.
template <typename T>
ForwardTrace<T> forward(const TransformerModel<T>& model, const Tokens& tokens);

// Forward through layer `upto` only (0 <= upto <= n); trace holds H_0..H_upto.
template <typename T>
ForwardTrace<T> forward_partial(const TransformerModel<T>& model, const Tokens& tokens,
                                int64_t upto);

// Continue a partial trace through layer `upto`. No-op if already there.
template <typename T>
void forward_extend(const TransformerModel<T>& model, ForwardTrace<T>& trace, int64_t upto);

// phi(N_p(H_n)): the model's own output distribution over the vocabulary.
template <typename T>
Tensor<T> final_logits(const TransformerModel<T>& model, const ForwardTrace<T>& trace);

// phi(layer_norm(h, gamma, beta)) — the unembedding applied under an
// arbitrary norm; shared by final_logits and the per-route exit heads.
template <typename T>
Tensor<T> head_logits(const TransformerModel<T>& model, const Tensor<T>& h,
                      const Tensor<T>& gamma, const Tensor<T>& beta);

template <typename T>
int64_t count_params(const std::vector<NamedParam<T>>& params, bool trainable_only,
                     std::optional<ParamGroup> filter = std::nullopt);

extern template struct TransformerModel<float>;
extern template struct TransformerModel<double>;

}  // namespace modtune
