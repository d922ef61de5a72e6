#pragma once

#include <vector>

#include "modtune/mod_head.hpp"
#include "modtune/model.hpp"
#include "modtune/tensor.hpp"

namespace modtune {

// task: CE of the ensemble logits against next tokens. distill: sum over
// student routes i in [0, k-2] of KL(P_i || P_n). total = task + lambda*distill,
// built as exactly that graph; when lambda = 0 or k = 1 the distill graph is
// never constructed and total aliases task.
template <typename T>
struct LossBundle {
  Tensor<T> task;
  Tensor<T> distill;  // scalar 0 outside the graph when absent
  Tensor<T> total;
  std::vector<T> per_route_task;  // detached per-route CE diagnostics
};

// Mean CE over unmasked positions; targets are the inputs shifted by one.
template <typename T>
Tensor<T> task_loss(const Tensor<T>& logits, const std::vector<int32_t>& targets,
                    const std::vector<uint8_t>* pad_mask);

// Sum_{i=0}^{k-2} KL(P_i || P_{k-1}), each term mean-reduced over unmasked
// positions. The teacher is gradient-detached when detach_teacher.
template <typename T>
Tensor<T> distill_loss(const std::vector<Tensor<T>>& route_probs,
                       const std::vector<uint8_t>* pad_mask, bool detach_teacher);

template <typename T>
Tensor<T> combined_loss(const Tensor<T>& task, const Tensor<T>& distill, T lambda);

// Assembles the full bundle for one batch per the head's config. The
// per-route diagnostics cost k extra CE evaluations, so callers that log
// sparsely can skip them off the logging steps.
template <typename T>
LossBundle<T> mod_losses(const ModHead<T>& head, const EnsembleOutput<T>& ens,
                         const std::vector<int32_t>& targets,
                         const std::vector<uint8_t>* pad_mask,
                         bool route_diagnostics = true);

}  // namespace modtune
