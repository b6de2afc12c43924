#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "orefsdet/autograd.hpp"

namespace orefsdet {

class GradCheckError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckOptions {
  double eps = 1e-4;
  /// Added to every analytic gradient entry. Nonzero only for fault injection.
  double analytic_perturbation = 0.0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
};

using ScalarFn = std::function<Var<double>(const std::vector<Var<double>>&)>;

/// Compares reverse-mode gradients of a scalar composite against central
/// differences: max over entries of |analytic - numeric| / max(1, |numeric|).
/// Non-finite values anywhere are reported as GradCheckError.
inline GradCheckResult grad_check(const ScalarFn& f, const std::vector<Tensor<double>>& inputs,
                                  GradCheckOptions opt = {}) {
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.emplace_back(t, true);
  Var<double> y = f(vars);
  if (y.numel() != 1) throw GradCheckError("grad_check: function must return a scalar");
  if (!std::isfinite(y.value()[0])) throw GradCheckError("grad_check: non-finite forward value");
  y.backward();

  auto eval = [&](const std::vector<Tensor<double>>& xs) {
    NoGradGuard ng;
    std::vector<Var<double>> vs;
    for (const auto& t : xs) vs.emplace_back(t, false);
    const double v = f(vs).value()[0];
    if (!std::isfinite(v)) throw GradCheckError("grad_check: non-finite value under perturbation");
    return v;
  };

  GradCheckResult res;
  std::vector<Tensor<double>> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor<double> analytic = vars[k].has_grad() ? vars[k].grad() : Tensor<double>(inputs[k].shape());
    if (!analytic.all_finite()) throw GradCheckError("grad_check: non-finite analytic gradient in input " + std::to_string(k));
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      const double x0 = inputs[k][i];
      probe[k][i] = x0 + opt.eps;
      const double fp = eval(probe);
      probe[k][i] = x0 - opt.eps;
      const double fm = eval(probe);
      probe[k][i] = x0;
      const double numeric = (fp - fm) / (2.0 * opt.eps);
      const double a = analytic[i] + opt.analytic_perturbation;
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      if (err > res.max_rel_error) res = {err, k, i};
    }
  }
  return res;
}

}  // namespace orefsdet
