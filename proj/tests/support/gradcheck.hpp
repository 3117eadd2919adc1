#pragma once

// Central finite-difference gradient checking for scalar-valued tensor
// functions. Independent of the backward closures it validates: it only
// calls the forward path with gradient recording disabled.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "rmc/tensor.hpp"

namespace rmc::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

// rel = |analytic - numeric| / max(|analytic|, |numeric|, floor)
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

inline double central_difference(const std::function<Tensor()>& f, Tensor& x, std::size_t i,
                                 double h) {
  NoGradGuard guard;
  auto d = x.data();
  const double saved = d[i];
  d[i] = saved + h;
  const double fp = f().item();
  d[i] = saved - h;
  const double fm = f().item();
  d[i] = saved;
  return (fp - fm) / (2.0 * h);
}

// Compares backward() against central differences for every coordinate of
// every input. Inputs must be leaves with requires_grad set.
inline GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                                  double h = 1e-5) {
  for (auto& x : inputs)
    if (x.has_grad()) x.zero_grad();
  Tensor loss = f();
  backward(loss);
  GradCheckResult res;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto& x = inputs[t];
    std::vector<double> analytic(x.numel(), 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double numeric = central_difference(f, x, i, h);
      const double err = relative_error(analytic[i], numeric);
      ++res.checked;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst = "input " + std::to_string(t) + " coord " + std::to_string(i) +
                    " analytic " + std::to_string(analytic[i]) + " numeric " +
                    std::to_string(numeric);
      }
    }
  }
  return res;
}

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

inline std::size_t random_extent(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

}  // namespace rmc::testing
