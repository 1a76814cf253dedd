#pragma once

#include <functional>

#include "crate/numerics/tensor.hpp"

namespace crate {

/// Scalar objective with analytic gradient. When `grad` is non-null the
/// callee fills it with d f / d x (same shape as x).
using GradFunction = std::function<double(const Tensor<double>& x, Tensor<double>* grad)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

/// Compares the analytic gradient against central differences coordinate by
/// coordinate: |a - c| / max(|a| + |c|, kGradCheckFloor), maximized over
/// coordinates. The floor keeps structurally zero gradients (e.g. a key bias
/// under softmax shift invariance) from scoring central-difference rounding
/// noise as a 100% error. A non-finite objective value throws "non_finite".
inline constexpr double kGradCheckFloor = 1e-6;

GradCheckReport grad_check_report(const GradFunction& f, const Tensor<double>& x, double h);

inline double grad_check(const GradFunction& f, const Tensor<double>& x, double h) {
  return grad_check_report(f, x, h).max_rel_error;
}

}  // namespace crate
