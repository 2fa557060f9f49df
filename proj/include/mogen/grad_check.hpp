#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mogen/ops.hpp"
#include "mogen/tensor.hpp"

namespace mogen {

struct GradCheckReport {
  bool passed = false;
  double max_rel_error = 0.0;
  std::int64_t worst_index = -1;
  std::string message;
};

// Compares the reverse-mode gradient of a scalar-valued map against central
// finite differences. Relative error uses max(|analytic|, |numeric|, 1) as
// denominator so near-zero gradients are judged on absolute scale.
template <typename S>
GradCheckReport grad_check(const std::function<Tensor<S>(const Tensor<S>&)>& f, const Tensor<S>& x,
                           double tol, S step = S(1e-5)) {
  GradCheckReport report;

  Tensor<S> probe = x.detach();
  probe.set_requires_grad(true);
  Tensor<S> y = f(probe);
  if (y.numel() != 1) {
    report.message = "grad_check: f must be scalar-valued, got " + shape_str(y.shape());
    return report;
  }
  if (!std::isfinite(static_cast<double>(y.item()))) {
    report.message = "grad_check: f(x) is not finite";
    return report;
  }
  backward(y);
  std::vector<S> analytic(static_cast<std::size_t>(x.numel()), S(0));
  if (probe.has_grad()) analytic = probe.grad();

  Tensor<S> work = x.detach();
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const S saved = work.at(i);
    NoGradGuard ng;
    work.mut(i) = saved + step;
    const S up = f(work).item();
    work.mut(i) = saved - step;
    const S down = f(work).item();
    work.mut(i) = saved;
    const double numeric = (static_cast<double>(up) - static_cast<double>(down)) /
                           (2.0 * static_cast<double>(step));
    const double a = static_cast<double>(analytic[static_cast<std::size_t>(i)]);
    if (!std::isfinite(numeric) || !std::isfinite(a)) {
      report.message = "grad_check: non-finite gradient at index " + std::to_string(i);
      return report;
    }
    const double denom = std::max({std::abs(a), std::abs(numeric), 1.0});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
    }
  }
  report.passed = report.max_rel_error < tol;
  if (!report.passed) {
    report.message = "grad_check: max relative error " + std::to_string(report.max_rel_error) +
                     " at index " + std::to_string(report.worst_index);
  }
  return report;
}

// Checks the gradient of a scalar loss with respect to one parameter tensor of
// a larger model: the loss closure reads the parameter in place.
template <typename S>
GradCheckReport grad_check_param(const std::function<Tensor<S>()>& loss, Tensor<S>& param,
                                 double tol, S step = S(1e-5)) {
  GradCheckReport report;
  param.zero_grad();
  Tensor<S> y = loss();
  if (y.numel() != 1) {
    report.message = "grad_check_param: loss must be scalar";
    return report;
  }
  backward(y);
  std::vector<S> analytic(static_cast<std::size_t>(param.numel()), S(0));
  if (param.has_grad()) analytic = param.grad();

  for (std::int64_t i = 0; i < param.numel(); ++i) {
    const S saved = param.at(i);
    NoGradGuard ng;
    param.mut(i) = saved + step;
    const S up = loss().item();
    param.mut(i) = saved - step;
    const S down = loss().item();
    param.mut(i) = saved;
    const double numeric = (static_cast<double>(up) - static_cast<double>(down)) /
                           (2.0 * static_cast<double>(step));
    const double a = static_cast<double>(analytic[static_cast<std::size_t>(i)]);
    if (!std::isfinite(numeric) || !std::isfinite(a)) {
      report.message = "grad_check_param: non-finite gradient at index " + std::to_string(i);
      return report;
    }
    const double denom = std::max({std::abs(a), std::abs(numeric), 1.0});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
    }
  }
  report.passed = report.max_rel_error < tol;
  if (!report.passed) {
    report.message = "grad_check_param: max relative error " +
                     std::to_string(report.max_rel_error) + " at index " +
                     std::to_string(report.worst_index);
  }
  return report;
}

}  // namespace mogen
