#pragma once

#include <optional>
#include <vector>

#include "modtune/tensor.hpp"

namespace modtune::ops {

// Differentiable operations. Every op executes eagerly and, when a Tape<T>
// is active and any input needs gradients, records a backward closure that
// accumulates into the inputs' grad buffers.
//
// Conventions:
//  - "last axis" ops treat a [d0 x ... x dn-1 x d] tensor as rows of length d.
//  - matmul-style ops flatten all leading axes of the left operand.
//  - reductions over rows/batches use mean, keeping loss scales independent
//    of batch size and sequence length.

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);  // same shape

// x: [... x d], bias: [d]; broadcasts bias over leading axes.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);  // elementwise, same shape

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c);

// a: [... x p], w: [p x q] -> [... x q]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& w);

// a: [... x p], w: [q x p] applied transposed -> [... x q]. Lets a tied LM
// head share the embedding table without materializing its transpose.
template <typename T>
Tensor<T> matmul_t(const Tensor<T>& a, const Tensor<T>& w);

// Batched matmul: a: [B... x m x p], b: [B... x p x q] -> [B... x m x q],
// identical leading axes.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b);

// Batched a * b^T: a: [B... x m x p], b: [B... x q x p] -> [B... x m x q].
template <typename T>
Tensor<T> bmm_t(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& x);  // rank-2 only

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int64_t> new_dims);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);

template <typename T>
Tensor<T> exp(const Tensor<T>& x);  // NumericError on overflow to inf

template <typename T>
Tensor<T> log(const Tensor<T>& x);  // NumericError on x <= 0

template <typename T>
Tensor<T> gelu(const Tensor<T>& x);  // tanh approximation

// Softmax over the last axis, computed with max-subtraction. -inf entries are
// legal and yield exactly 0 (they are excluded from the normalizer); NaN, +inf
// or an all--inf row raise NumericError.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x);

// scores: [... x S x S]; entries with column > row are set to -inf so softmax
// gives them weight 0. Gradients at masked positions are exactly zero.
template <typename T>
Tensor<T> apply_causal_mask(const Tensor<T>& scores);

// x: [... x d], gamma/beta: [d]. Per-row normalization to zero mean and unit
// variance (eps-guarded), then scale and shift.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

// logits: [... x V] flattened to N rows; targets.size() == N. Mean over rows
// of -log softmax(logits)[target], via log-sum-exp. With row_mask, only rows
// with a nonzero mask enter the mean; an all-masked batch is a
// ValidationError. Targets outside [0, V) raise IndexError.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int32_t>& targets,
                        const std::vector<uint8_t>* row_mask = nullptr);

// p, q: [... x V] probability rows (validated: entries >= 0, rows sum to 1
// within 1e-5). Mean over selected rows of sum_v p ln(p/q) in nats. Terms
// with p = 0 contribute 0; q is floored at 1e-12 before the division.
template <typename T>
Tensor<T> kl_div(const Tensor<T>& p, const Tensor<T>& q,
                 const std::vector<uint8_t>* row_mask = nullptr);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// table: [V x d], tokens: [B x S] -> [B x S x d]; backward scatter-adds into
// the table gradient. Token ids outside [0, V) raise IndexError.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const Tokens& tokens);

// route_logits: k tensors [B x S x V]; weights: [B x S x k].
// out[b,s,:] = sum_i weights[b,s,i] * route_logits[i][b,s,:].
// The i = 0 term initializes the accumulator, so a single route with weight
// 1.0 reproduces its logits bit-for-bit.
template <typename T>
Tensor<T> ensemble_mix(const std::vector<Tensor<T>>& route_logits, const Tensor<T>& weights);

template <typename T>
Tensor<T> detach(const Tensor<T>& x);

// --- non-differentiable value utilities ---

// Index of the max element of each last-axis row; ties toward the lower index.
template <typename T>
std::vector<int64_t> argmax_last(const Tensor<T>& x);

// Indices of the K largest entries of each last-axis row, descending by
// value; ties toward the lower index. Row-major [rows x K] result.
template <typename T>
std::vector<int64_t> topk_indices_last(const Tensor<T>& x, int64_t K);

template <typename T>
bool all_finite(const Tensor<T>& x);

}  // namespace modtune::ops
