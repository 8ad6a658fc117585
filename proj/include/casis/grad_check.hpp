#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "casis/errors.hpp"
#include "casis/tensor.hpp"

namespace casis {

struct GradCheckReport {
  std::string op_name;
  double max_relative_error = 0.0;
  std::map<std::string, double> per_parameter_errors;
  double tolerance = 0.0;
  bool passed = false;
};

inline constexpr double kGradScaleFloor = 1e-6;

struct NamedInput {
  std::string name;
  Tensor<double> tensor;
};

/// Compares analytic gradients of a scalar closure against central finite
/// differences (f(x+h) - f(x-h)) / 2h. The error for one input is
/// max|analytic - numeric| / max(max|analytic|, max|numeric|), i.e. relative to
/// the gradient's scale. The scale is floored at kGradScaleFloor so that an input
/// whose true gradient is zero (e.g. a bias ahead of a normalization) is judged
/// by its absolute error instead of finite-difference noise.
inline GradCheckReport grad_check(const std::string& op_name,
                                  const std::function<Tensor<double>()>& closure,
                                  std::vector<NamedInput> inputs, double tolerance = 1e-4,
                                  double step = 1e-4) {
  for (auto& in : inputs) {
    in.tensor.set_requires_grad(true);
    in.tensor.zero_grad();
  }
  Tensor<double> out = closure();
  if (out.numel() != 1)
    throw UsageError("grad_check(" + op_name + "): closure must return a scalar, got shape " +
                     shape_str(out.shape()));
  out.backward();

  GradCheckReport report;
  report.op_name = op_name;
  report.tolerance = tolerance;
  for (auto& in : inputs) {
    std::vector<double> analytic(in.tensor.numel(), 0.0);
    if (in.tensor.has_grad()) std::copy(in.tensor.grad().begin(), in.tensor.grad().end(), analytic.begin());
    std::vector<double> numeric(in.tensor.numel());
    auto values = in.tensor.mutable_data();
    {
      NoGradGuard ng;
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double orig = values[i];
        values[i] = orig + step;
        const double fp = closure().item();
        values[i] = orig - step;
        const double fm = closure().item();
        values[i] = orig;
        numeric[i] = (fp - fm) / (2.0 * step);
      }
    }
    double diff = 0.0, scale_a = 0.0, scale_n = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
      scale_a = std::max(scale_a, std::abs(analytic[i]));
      scale_n = std::max(scale_n, std::abs(numeric[i]));
    }
    const double denom = std::max({scale_a, scale_n, kGradScaleFloor});
    const double err = diff / denom;
    report.per_parameter_errors[in.name] = err;
    report.max_relative_error = std::max(report.max_relative_error, err);
    in.tensor.zero_grad();
  }
  report.passed = report.max_relative_error < tolerance;
  return report;
}

}  // namespace casis
