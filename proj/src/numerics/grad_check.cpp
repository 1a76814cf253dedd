#include "crate/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace crate {

namespace {

double checked(double v) {
  if (!std::isfinite(v)) throw Error("non_finite", "objective is not finite during grad check");
  return v;
}

}  // namespace

GradCheckReport grad_check_report(const GradFunction& f, const Tensor<double>& x, double h) {
  Tensor<double> analytic(x.shape);
  checked(f(x, &analytic));
  require(analytic.numel() == x.numel(), "bad_shape", "gradient shape mismatch");

  GradCheckReport report;
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double original = probe.values[i];
    probe.values[i] = original + h;
    const double plus = checked(f(probe, nullptr));
    probe.values[i] = original - h;
    const double minus = checked(f(probe, nullptr));
    probe.values[i] = original;

    const double numeric = (plus - minus) / (2.0 * h);
    const double a = analytic.values[i];
    const double rel = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), kGradCheckFloor);
    if (rel > report.max_rel_error) {
      report = {rel, i, a, numeric};
    }
  }
  return report;
}

}  // namespace crate
