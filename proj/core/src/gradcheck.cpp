#include "demf/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace demf {

GradReport grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs,
                      double h, double tol) {
  GradReport report;
  report.tolerance = tol;
  if (!(h > 0.0 && h <= 1e-3)) {
    report.message = "step h must lie in (0, 1e-3]";
    return report;
  }

  std::vector<Tensor> handles = inputs;
  for (Tensor& t : handles) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  const Tensor loss = f();
  if (loss.numel() != 1) {
    report.message = "function is not scalar-valued";
    return report;
  }
  loss.backward();

  std::vector<std::vector<Real>> analytic;
  analytic.reserve(handles.size());
  for (const Tensor& t : handles) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.numel(), Real{0});
    }
  }

  NoGradGuard no_grad;
  for (std::size_t ti = 0; ti < handles.size(); ++ti) {
    auto values = handles[ti].data_mut();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const Real saved = values[i];
      values[i] = saved + static_cast<Real>(h);
      const double up = f().item();
      values[i] = saved - static_cast<Real>(h);
      const double down = f().item();
      values[i] = saved;

      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[ti][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++report.coordinates;
      if (std::isnan(rel) || rel > report.max_rel_error || report.coordinates == 1) {
        report.max_rel_error = std::isnan(rel) ? INFINITY : rel;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
        report.worst_input = ti;
        report.worst_index = i;
      }
    }
  }
  report.passed = report.max_rel_error <= tol;
  std::ostringstream os;
  os << "max relative error " << report.max_rel_error << " (input " << report.worst_input
     << ", index " << report.worst_index << ": analytic " << report.worst_analytic
     << ", numeric " << report.worst_numeric << ") over " << report.coordinates
     << " coordinates, tol " << tol;
  report.message = os.str();
  return report;
}

}  // namespace demf
