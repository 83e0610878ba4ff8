#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "cloc/tensor.hpp"

namespace cloc {

struct GradientCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-5;
  // Denominator floor for the relative error, so near-zero gradient
  // components are compared on an absolute scale.
  double relative_floor = 1e-3;
  // Skip a coordinate when its +-step probe flips the sign pattern of any
  // ReLU/hinge input; central differences are meaningless across a kink.
  bool skip_kink_crossings = true;
};

struct ParameterCheck {
  std::size_t elements = 0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  double max_relative_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradientCheckReport {
  std::vector<ParameterCheck> parameters;
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  bool passed = false;
  std::string diagnostic;
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares reverse-mode gradients of the scalar f() with respect to params
/// against central differences. f must rebuild its graph from the current
/// parameter values on every call.
inline GradientCheckReport gradient_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                          const GradientCheckOptions& opts = {}) {
  if (!(opts.step > 0.0)) throw UsageError("gradient_check: step must be positive");
  GradientCheckReport report;
  std::ostringstream diag;
  bool finite = true;

  for (auto& p : params) p.zero_grad();
  const Tensor root = f();
  if (!std::isfinite(root.item())) {
    report.diagnostic = "non-finite objective at the base point";
    return report;
  }
  root.backward();
  const std::uint64_t base_signature = kink_signature(root);

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& param = params[pi];
    ParameterCheck pc;
    pc.elements = param.size();
    std::vector<double> analytic(param.size(), 0.0);
    if (param.has_grad()) std::copy(param.grad().begin(), param.grad().end(), analytic.begin());

    auto values = param.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + opts.step;
      const Tensor plus = f();
      values[i] = original - opts.step;
      const Tensor minus = f();
      values[i] = original;

      const double fp = plus.item(), fm = minus.item();
      if (!std::isfinite(fp) || !std::isfinite(fm) || !std::isfinite(analytic[i])) {
        finite = false;
        diag << "non-finite value at parameter " << pi << " element " << i << "; ";
        continue;
      }
      if (opts.skip_kink_crossings &&
          (kink_signature(plus) != base_signature || kink_signature(minus) != base_signature)) {
        ++pc.skipped_kinks;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * opts.step);
      pc.max_abs_error = std::max(pc.max_abs_error, std::abs(numeric - analytic[i]));
      pc.max_relative_error = std::max(pc.max_relative_error, relative_error(analytic[i], numeric, opts.relative_floor));
      ++pc.checked;
    }
    report.max_relative_error = std::max(report.max_relative_error, pc.max_relative_error);
    report.checked += pc.checked;
    report.skipped += pc.skipped_kinks;
    report.parameters.push_back(pc);
  }

  const bool nothing_checked = report.checked == 0 && report.skipped > 0;
  report.passed = finite && !nothing_checked && report.max_relative_error < opts.tolerance;
  if (!finite) {
    report.diagnostic = diag.str();
  } else if (nothing_checked) {
    report.diagnostic = "every coordinate crossed a kink; nothing was compared";
  } else if (!report.passed) {
    std::ostringstream os;
    os << "max relative error " << report.max_relative_error << " exceeds tolerance " << opts.tolerance;
    report.diagnostic = os.str();
  }
  for (auto& p : params) p.zero_grad();
  return report;
}

}  // namespace cloc
