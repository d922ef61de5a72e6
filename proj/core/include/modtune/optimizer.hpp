#pragma once

#include <vector>

#include "modtune/common.hpp"
#include "modtune/tensor.hpp"

namespace modtune {

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global-norm clip; <= 0 disables
};

// Per-parameter Adam with decoupled weight decay and a global grad-norm
// clip. step() validates every gradient is finite first (NumericError
// otherwise), so a NaN/Inf can never reach the moment buffers or weights.
// The clip norm accumulates in double, element by element, in parameter
// order — exact-zero gradients are bitwise no-ops in that chain, which the
// reduction-to-baseline guarantee relies on.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, AdamWConfig cfg);

  void step();
  void zero_grad();
  int64_t steps_taken() const { return t_; }
  // Global grad norm of the most recent step(), pre-clip.
  double last_grad_norm() const { return last_norm_; }

 private:
  struct Slot {
    Tensor<T> param;
    std::vector<T> m, v;
  };
  std::vector<Slot> slots_;
  AdamWConfig cfg_;
  int64_t t_ = 0;
  double last_norm_ = 0.0;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace modtune
