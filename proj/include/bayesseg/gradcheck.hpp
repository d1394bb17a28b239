#pragma once
// Central finite-difference gradient checking.
//
// Error per coordinate is |analytic - numeric| / max(1, |analytic|). Functions
// with kinks (relu at 0, clamp boundaries) are outside the contract: the
// check assumes smoothness in an eps-neighbourhood of the point.

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "bayesseg/tensor.hpp"

namespace bayesseg {

namespace detail {

inline void check_eps(double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-3]");
}

inline double eval_scalar(const std::function<Tensor()>& f) {
  const Tensor y = f();
  const double v = y.item();
  if (!std::isfinite(v)) throw NumericError("grad_check: function is non-finite at a perturbed point");
  return v;
}

}  // namespace detail

/// Checks d f / d params for every coordinate of every parameter (or an evenly
/// spaced subset of at most `max_coords` per parameter when non-zero).
/// Parameters are perturbed in place and restored.
inline double grad_check_params(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps,
                                std::size_t max_coords = 0) {
  detail::check_eps(eps);
  for (auto& p : params) p.zero_grad();
  {
    const Tensor y = f();
    if (y.size() != 1) throw ShapeError("grad_check", "size", "function must be scalar-valued");
    if (!std::isfinite(y.item())) throw NumericError("grad_check: function is non-finite at the base point");
    backward(y);
  }
  double worst = 0.0;
  for (auto& p : params) {
    const std::vector<double> analytic = p.grad();
    const std::size_t n = p.size();
    const std::size_t step = (max_coords == 0 || n <= max_coords) ? 1 : (n + max_coords - 1) / max_coords;
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < n; i += step) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = detail::eval_scalar(f);
      values[i] = saved - eps;
      const double down = detail::eval_scalar(f);
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
    }
    p.zero_grad();
  }
  return worst;
}

/// Max relative error between the analytic gradient of `f` at `point` and a
/// central difference with step `eps`.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double eps) {
  Tensor x = point.clone_leaf();
  return grad_check_params([&] { return f(x); }, {x}, eps);
}

}  // namespace bayesseg
