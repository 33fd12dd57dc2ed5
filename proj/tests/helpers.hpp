#pragma once

// Shared test utilities: random tensors and a finite-difference gradient
// check that runs through a whole model's parameter set.

#include <cmath>
#include <vector>

#include "runet/loss.hpp"
#include "runet/model.hpp"
#include "runet/rng.hpp"

namespace testutil {

template <class T>
runet::TensorT<T> rand_tensor(std::vector<std::size_t> shape, runet::Rng& rng,
                              double lo = -1, double hi = 1) {
  runet::TensorT<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Mean masked Dice loss of a slice sequence pushed through the model with
/// freshly zeroed recurrent state (dropout off, so evaluation is pure).
inline runet::VarT<double> model_loss(
    runet::ModelT<double>& m, const std::vector<runet::TensorT<double>>& xs,
    const std::vector<runet::TensorT<double>>& gs,
    const std::vector<runet::TensorT<double>>& ms) {
  using namespace runet;
  Rng unused(0);
  VolumeStateT<double> st = initial_state(m);
  VarT<double> loss;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    auto y = forward_slice(m, make_leaf<double>(xs[t]), st, false, unused);
    auto l = dice_loss_masked(y, make_leaf<double>(gs[t]),
                              make_leaf<double>(ms[t]));
    loss = loss ? vadd(loss, l) : l;
  }
  return vscale(loss, 1.0 / static_cast<double>(xs.size()));
}

/// Central finite differences over every model parameter; returns the max
/// per-coordinate relative error against reverse mode.
inline double model_grad_check(runet::ModelT<double>& m,
                               const std::vector<runet::TensorT<double>>& xs,
                               const std::vector<runet::TensorT<double>>& gs,
                               const std::vector<runet::TensorT<double>>& ms,
                               double h = 1e-4) {
  using namespace runet;
  zero_grads(m.params);
  backward(model_loss(m, xs, gs, ms));
  std::vector<TensorT<double>> analytic;
  for (auto& p : m.params) {
    p->ensure_grad();
    analytic.push_back(p->grad);
  }
  auto eval = [&]() {
    NoGradGuard ng;
    return model_loss(m, xs, gs, ms)->value[0];
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < m.params.size(); ++k) {
    auto& value = m.params[k]->value;
    for (std::size_t i = 0; i < value.numel(); ++i) {
      const double x0 = value[i];
      value[i] = x0 + h;
      const double fp = eval();
      value[i] = x0 - h;
      const double fm = eval();
      value[i] = x0;
      const double fd = (fp - fm) / (2.0 * h);
      const double g = analytic[k][i];
      const double denom = std::max({std::fabs(g), std::fabs(fd), 1.0});
      worst = std::max(worst, std::fabs(g - fd) / denom);
    }
  }
  zero_grads(m.params);
  return worst;
}

}  // namespace testutil
