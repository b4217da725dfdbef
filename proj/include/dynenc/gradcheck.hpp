#pragma once
// Central finite-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "dynenc/tensor.hpp"

namespace dynenc {

// Compares analytic gradients of the scalar `f` with respect to every tensor
// in `params` against central differences with step h. Returns the maximum
// over coordinates of |analytic - numeric| / max(1, |analytic|).
// `f` must rebuild its computation from the current parameter values on each
// call and must be deterministic.
inline double finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                double h = 1e-5) {
  if (!(h > 0)) throw std::invalid_argument("finite_diff_check: h must be positive");
  std::vector<std::vector<double>> analytic;
  {
    TapeScope scope;
    for (auto& p : params) {
      p.set_requires_grad(true);
      p.zero_grad();
    }
    Tensor root = f();
    if (!std::isfinite(root.item())) throw std::runtime_error("finite_diff_check: f is not finite");
    if (root.requires_grad()) backward(root);
    for (auto& p : params) {
      if (p.has_grad())
        analytic.emplace_back(p.grad().begin(), p.grad().end());
      else
        analytic.emplace_back(p.size(), 0.0);
    }
  }
  NoGradGuard no_grad;
  auto eval = [&] {
    double v = f().item();
    if (!std::isfinite(v)) throw std::runtime_error("finite_diff_check: f is not finite");
    return v;
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto data = params[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double up = eval();
      data[i] = orig - h;
      const double down = eval();
      data[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  for (auto& p : params) p.zero_grad();
  return worst;
}

}  // namespace dynenc
