#pragma once

// Central finite-difference gradient checking. Only forward evaluations are
// used, so the check stays independent of the backward rules it validates.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "clmex/tensor.hpp"

namespace clmex::verify {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  bool passed(double tolerance) const { return max_relative_error <= tolerance; }
};

/// |a - n| / max(|a|, |n|, floor); the floor keeps noise on vanishing
/// gradients from dominating.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares the analytic gradient of `fn(inputs)` against central differences
/// with step h for every element of every input.
inline GradCheckResult check_gradients(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                                       std::vector<Tensor> inputs, double h = 1e-5) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor loss = fn(inputs);
  loss.backward();

  GradCheckResult result;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    if (analytic.empty()) analytic.assign(t.size(), 0.0);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double saved = t.mutable_values()[i];
      double plus, minus;
      {
        NoGradGuard guard;
        t.mutable_values()[i] = saved + h;
        plus = fn(inputs).item();
        t.mutable_values()[i] = saved - h;
        minus = fn(inputs).item();
      }
      t.mutable_values()[i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      result.max_relative_error = std::max(result.max_relative_error, relative_error(analytic[i], numeric));
      ++result.checked;
    }
  }
  return result;
}

}  // namespace clmex::verify
