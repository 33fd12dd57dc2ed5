#pragma once

#include "runet/autograd.hpp"
#include "runet/ops.hpp"

namespace runet {

inline constexpr double kDiceSmooth = 1e-6;

/// Soft Dice loss with squared denominator, restricted to mask==1 voxels:
///   1 - (2*sum(m*p*g) + eps) / (sum(m*p^2) + sum(m*g^2) + eps)
/// Masked-out voxels contribute neither value nor gradient.
template <class T>
VarT<T> dice_loss_masked(const VarT<T>& pred, const VarT<T>& target,
                         const VarT<T>& mask, double eps = kDiceSmooth) {
  expect_same_shape("dice pred/target", pred->value.shape(),
                    target->value.shape());
  expect_same_shape("dice pred/mask", pred->value.shape(),
                    mask->value.shape());
  auto mp = hadamard(mask, pred);
  auto inter = vsum(hadamard(mp, target));
  auto p_sq = vsum(hadamard(mp, pred));
  auto g_sq = vsum(hadamard(mask, hadamard(target, target)));
  auto num = vshift(vscale(inter, 2.0), eps);
  auto den = vshift(vadd(p_sq, g_sq), eps);
  return vshift(vscale(vdiv(num, den), -1.0), 1.0);
}

/// Plain-value soft Dice loss (same formula, no tape); used for validation.
template <class T>
double dice_loss_value(const TensorT<T>& pred, const TensorT<T>& target,
                       const TensorT<T>& mask, double eps = kDiceSmooth) {
  expect_same_shape("dice pred/target", pred.shape(), target.shape());
  expect_same_shape("dice pred/mask", pred.shape(), mask.shape());
  double inter = 0.0, p_sq = 0.0, g_sq = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double m = static_cast<double>(mask[i]);
    const double p = static_cast<double>(pred[i]);
    const double g = static_cast<double>(target[i]);
    inter += m * p * g;
    p_sq += m * p * p;
    g_sq += m * g * g;
  }
  return 1.0 - (2.0 * inter + eps) / (p_sq + g_sq + eps);
}

}  // namespace runet
