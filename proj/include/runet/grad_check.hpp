#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "runet/autograd.hpp"
#include "runet/tensor.hpp"

namespace runet {

// Central finite differences against the reverse-mode gradient. Runs in
// double regardless of the training scalar type; h = 1e-4 per contract.
//
// F maps a vector of leaf vars to a scalar var. It must be deterministic:
// anything stochastic inside (dropout) has to reseed from a fixed value on
// every call.

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords = 0;
};

template <class F>
GradCheckResult grad_check_full(F f, std::vector<TensorT<double>> points,
                                double h = 1e-4) {
  std::vector<VarT<double>> leaves;
  leaves.reserve(points.size());
  for (auto& p : points) leaves.push_back(make_leaf<double>(p, true));

  auto out = f(leaves);
  if (out->value.numel() != 1)
    throw ShapeError("grad_check requires a scalar-valued function");
  backward(out);

  std::vector<TensorT<double>> analytic;
  for (auto& leaf : leaves) {
    leaf->ensure_grad();
    analytic.push_back(leaf->grad);
  }

  auto eval = [&](const std::vector<TensorT<double>>& pts) {
    NoGradGuard ng;
    std::vector<VarT<double>> frozen;
    frozen.reserve(pts.size());
    for (const auto& p : pts) frozen.push_back(make_leaf<double>(p, false));
    return static_cast<double>(f(frozen)->value[0]);
  };

  GradCheckResult res;
  for (std::size_t k = 0; k < points.size(); ++k) {
    for (std::size_t i = 0; i < points[k].numel(); ++i) {
      const double x0 = points[k][i];
      points[k][i] = x0 + h;
      const double fp = eval(points);
      points[k][i] = x0 - h;
      const double fm = eval(points);
      points[k][i] = x0;
      const double fd = (fp - fm) / (2.0 * h);
      const double g = analytic[k][i];
      const double denom = std::max({std::fabs(g), std::fabs(fd), 1.0});
      res.max_rel_error = std::max(res.max_rel_error, std::fabs(g - fd) / denom);
      ++res.coords;
    }
  }
  return res;
}

template <class F>
double grad_check(F f, std::vector<TensorT<double>> points, double h = 1e-4) {
  return grad_check_full(std::move(f), std::move(points), h).max_rel_error;
}

}  // namespace runet
