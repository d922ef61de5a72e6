#include "modtune/optimizer.hpp"

#include <cmath>

namespace modtune {

template <typename T>
AdamW<T>::AdamW(std::vector<Tensor<T>> params, AdamWConfig cfg) : cfg_(cfg) {
  if (!(cfg.lr > 0)) throw ConfigError("optimizer: lr must be > 0");
  if (cfg.beta1 < 0 || cfg.beta1 >= 1 || cfg.beta2 < 0 || cfg.beta2 >= 1) {
    throw ConfigError("optimizer: betas must be in [0, 1)");
  }
  slots_.reserve(params.size());
  for (auto& p : params) {
    if (!p.needs_grad()) throw StateError("optimizer: parameter is not trainable");
    p.ensure_grad();
    Slot s;
    s.param = p;
    s.m.assign(static_cast<size_t>(p.numel()), T(0));
    s.v.assign(static_cast<size_t>(p.numel()), T(0));
    slots_.push_back(std::move(s));
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& s : slots_) s.param.zero_grad();
}

template <typename T>
void AdamW<T>::step() {
  double norm_sq = 0.0;
  for (auto& s : slots_) {
    for (T g : s.param.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("optimizer: non-finite gradient in step " + std::to_string(t_ + 1));
      }
      const double gd = static_cast<double>(g);
      norm_sq += gd * gd;
    }
  }
  last_norm_ = std::sqrt(norm_sq);
  const T scale = (cfg_.grad_clip > 0 && last_norm_ > cfg_.grad_clip)
                      ? static_cast<T>(cfg_.grad_clip / last_norm_)
                      : T(1);
  ++t_;
  const T bc1 = T(1) - static_cast<T>(std::pow(cfg_.beta1, static_cast<double>(t_)));
  const T bc2 = T(1) - static_cast<T>(std::pow(cfg_.beta2, static_cast<double>(t_)));
  const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
  const T lr = static_cast<T>(cfg_.lr), eps = static_cast<T>(cfg_.eps);
  const T wd = static_cast<T>(cfg_.weight_decay);
  for (auto& s : slots_) {
    auto pv = s.param.values();
    auto gv = s.param.grad();
    for (size_t i = 0; i < pv.size(); ++i) {
      const T g = gv[i] * scale;
      s.m[i] = b1 * s.m[i] + (T(1) - b1) * g;
      s.v[i] = b2 * s.v[i] + (T(1) - b2) * g * g;
      const T m_hat = s.m[i] / bc1;
      const T v_hat = s.v[i] / bc2;
      pv[i] -= lr * (m_hat / (std::sqrt(v_hat) + eps) + wd * pv[i]);
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace modtune
