#pragma once

#include <functional>
#include <string>
#include <vector>

#include "snt/tensor.hpp"

namespace snt {

// Central-difference gradient verification. `loss_fn` rebuilds the scalar
// loss from the current parameter values; `params` are the tensors whose
// gradients are being checked. Run at f64 (T = double), with any dropout in
// the graph forced to eval mode by the caller.
//
// Relative error per sampled coordinate:
//   |analytic - (f(t+eps) - f(t-eps)) / (2 eps)| / max(1, |analytic|)
template <class T>
double grad_check(const std::function<TensorT<T>()>& loss_fn, std::vector<TensorT<T>> params,
                  double eps = 1e-3, int coords_per_tensor = 8) {
  // Analytic pass.
  for (auto& p : params) p.zero_grad();
  {
    TensorT<T> loss = loss_fn();
    loss.backward();
  }

  double max_rel = 0.0;
  for (auto& p : params) {
    const std::int64_t sz = p.numel();
    const std::int64_t step = std::max<std::int64_t>(1, sz / coords_per_tensor);
    for (std::int64_t i = 0; i < sz; i += step) {
      const T saved = p.data()[i];
      double analytic = 0.0;
      if (p.has_grad()) analytic = static_cast<double>(p.grad_vec()[i]);

      double f_plus, f_minus;
      {
        NoGradGuard ng;
        p.data()[i] = saved + static_cast<T>(eps);
        f_plus = static_cast<double>(loss_fn().item());
        p.data()[i] = saved - static_cast<T>(eps);
        f_minus = static_cast<double>(loss_fn().item());
        p.data()[i] = saved;
      }
      const double numeric = (f_plus - f_minus) / (2.0 * eps);
      const double rel = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
      if (rel > max_rel) max_rel = rel;
    }
  }
  return max_rel;
}

struct GradCheckCase {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 1e-3;
  bool passed() const { return max_rel_err < tolerance; }
};

}  // namespace snt
