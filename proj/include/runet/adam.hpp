#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "runet/autograd.hpp"
#include "runet/tensor.hpp"

namespace runet {

struct AdamConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (lr <= 0) throw ParamError("learning rate must be positive");
    if (beta1 <= 0 || beta1 >= 1 || beta2 <= 0 || beta2 >= 1)
      throw ParamError("adam betas must lie in (0,1)");
    if (eps <= 0) throw ParamError("adam epsilon must be positive");
  }
};

/// Per-parameter first/second moment accumulators plus the step counter.
template <class T>
struct AdamStateT {
  std::vector<TensorT<T>> m, v;
  std::uint64_t t = 0;

  void init(const std::vector<VarT<T>>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p->value.shape());
      v.emplace_back(p->value.shape());
    }
    t = 0;
  }

  bool matches(const std::vector<VarT<T>>& params) const {
    if (m.size() != params.size() || v.size() != params.size()) return false;
    for (std::size_t i = 0; i < params.size(); ++i)
      if (m[i].shape() != params[i]->value.shape()) return false;
    return true;
  }
};

using AdamState = AdamStateT<float>;

/// Bias-corrected Adam update; reads each parameter's accumulated gradient
/// and leaves it untouched (callers zero grads between steps).
template <class T>
void adam_step(std::vector<VarT<T>>& params, AdamStateT<T>& st,
               const AdamConfig& cfg) {
  cfg.validate();
  if (!st.matches(params)) st.init(params);
  st.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    p.ensure_grad();
    TensorT<T>& m = st.m[k];
    TensorT<T>& v = st.v[k];
    const std::size_t n = p.value.numel();
    for (std::size_t i = 0; i < n; ++i) {
      const double g = static_cast<double>(p.grad[i]);
      const double mi = cfg.beta1 * static_cast<double>(m[i]) +
                        (1.0 - cfg.beta1) * g;
      const double vi = cfg.beta2 * static_cast<double>(v[i]) +
                        (1.0 - cfg.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double m_hat = mi / bc1;
      const double v_hat = vi / bc2;
      p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) -
                                  cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
    }
  }
}

}  // namespace runet
