#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "modtune/model.hpp"
#include "modtune/tensor.hpp"

namespace modtune::testing {

// Uniform random tensor in [lo, hi).
template <typename T>
Tensor<T> rand_tensor(std::vector<int64_t> dims, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t = Tensor<T>::zeros(std::move(dims));
  for (T& v : t.values()) v = static_cast<T>(lo + (hi - lo) * rng.uniform());
  return t;
}

// Max relative error between the tape's gradients and central finite
// differences over every element of every leaf. rebuild() must recompute the
// scalar loss from the leaves' current values; it runs without an active
// tape during the FD evaluations.
inline double max_grad_rel_err(std::vector<Tensor<double>>& leaves,
                               const std::function<Tensor<double>()>& rebuild,
                               double h = 1e-5) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    Tensor<double> loss = rebuild();
    tape.backward(loss);
    for (const auto& leaf : leaves) {
      std::vector<double> g(static_cast<size_t>(leaf.numel()), 0.0);
      if (leaf.grad_allocated()) {
        const auto gs = leaf.grad();
        g.assign(gs.begin(), gs.end());
      }
      analytic.push_back(std::move(g));
    }
  }
  for (auto& leaf : leaves) leaf.set_requires_grad(false);

  double worst = 0.0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto vals = leaves[li].values();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double up = rebuild().item();
      vals[i] = orig - h;
      const double down = rebuild().item();
      vals[i] = orig;
      const double fd = (up - down) / (2.0 * h);
      const double an = analytic[li][i];
      const double rel = std::abs(an - fd) / std::max(1e-6, std::abs(an) + std::abs(fd));
      worst = std::max(worst, rel);
    }
  }
  for (auto& leaf : leaves) leaf.set_requires_grad(true);
  return worst;
}

inline bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.dims() != b.dims()) return false;
  const auto av = a.values();
  const auto bv = b.values();
  for (size_t i = 0; i < av.size(); ++i) {
    if (std::memcmp(&av[i], &bv[i], sizeof(float)) != 0) return false;
  }
  return true;
}

inline bool bitwise_equal(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.dims() != b.dims()) return false;
  const auto av = a.values();
  const auto bv = b.values();
  for (size_t i = 0; i < av.size(); ++i) {
    if (std::memcmp(&av[i], &bv[i], sizeof(double)) != 0) return false;
  }
  return true;
}

// Snapshot every named parameter by value for later bitwise comparison.
template <typename T>
std::map<std::string, Tensor<T>> snapshot(const std::vector<NamedParam<T>>& params) {
  std::map<std::string, Tensor<T>> out;
  for (const auto& np : params) out.emplace(np.name, np.tensor.clone());
  return out;
}

}  // namespace modtune::testing
