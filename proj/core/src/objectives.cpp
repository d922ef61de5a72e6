#include "modtune/objectives.hpp"

#include "modtune/ops.hpp"

namespace modtune {

template <typename T>
Tensor<T> task_loss(const Tensor<T>& logits, const std::vector<int32_t>& targets,
                    const std::vector<uint8_t>* pad_mask) {
  return ops::cross_entropy(logits, targets, pad_mask);
}

template <typename T>
Tensor<T> distill_loss(const std::vector<Tensor<T>>& route_probs,
                       const std::vector<uint8_t>* pad_mask, bool detach_teacher) {
  const size_t k = route_probs.size();
  if (k <= 1) return Tensor<T>::scalar(T(0));  // empty student sum
  Tensor<T> teacher = detach_teacher ? ops::detach(route_probs[k - 1]) : route_probs[k - 1];
  Tensor<T> total = ops::kl_div(route_probs[0], teacher, pad_mask);
  for (size_t i = 1; i + 1 < k; ++i) {
    total = ops::add(total, ops::kl_div(route_probs[i], teacher, pad_mask));
  }
  return total;
}

template <typename T>
Tensor<T> combined_loss(const Tensor<T>& task, const Tensor<T>& distill, T lambda) {
  return ops::add(task, ops::scale(distill, lambda));
}

template <typename T>
LossBundle<T> mod_losses(const ModHead<T>& head, const EnsembleOutput<T>& ens,
                         const std::vector<int32_t>& targets,
                         const std::vector<uint8_t>* pad_mask, bool route_diagnostics) {
  LossBundle<T> bundle;
  bundle.task = task_loss(ens.ensemble_logits, targets, pad_mask);
  const bool wants_distill = head.cfg.lambda > 0 && head.cfg.k > 1;
  if (wants_distill) {
    if (ens.route_probs.empty()) {
      throw StateError("mod_losses: distillation needs route probs (ensemble with_probs)");
    }
    bundle.distill = distill_loss(ens.route_probs, pad_mask, head.cfg.detach_teacher);
    bundle.total = combined_loss(bundle.task, bundle.distill, T(head.cfg.lambda));
  } else {
    bundle.distill = Tensor<T>::scalar(T(0));
    bundle.total = bundle.task;
  }
  if (route_diagnostics) {
    bundle.per_route_task.reserve(ens.route_logits.size());
    for (const auto& l : ens.route_logits) {
      bundle.per_route_task.push_back(
          ops::cross_entropy(ops::detach(l), targets, pad_mask).item());
    }
  }
  return bundle;
}

#define MODTUNE_INSTANTIATE_OBJECTIVES(T)                                                  \
  template struct LossBundle<T>;                                                           \
  template Tensor<T> task_loss(const Tensor<T>&, const std::vector<int32_t>&,              \
                               const std::vector<uint8_t>*);                               \
  template Tensor<T> distill_loss(const std::vector<Tensor<T>>&,                           \
                                  const std::vector<uint8_t>*, bool);                      \
  template Tensor<T> combined_loss(const Tensor<T>&, const Tensor<T>&, T);                 \
  template LossBundle<T> mod_losses(const ModHead<T>&, const EnsembleOutput<T>&,           \
                                    const std::vector<int32_t>&,                           \
                                    const std::vector<uint8_t>*, bool);

MODTUNE_INSTANTIATE_OBJECTIVES(float)
MODTUNE_INSTANTIATE_OBJECTIVES(double)

#undef MODTUNE_INSTANTIATE_OBJECTIVES

}  // namespace modtune
