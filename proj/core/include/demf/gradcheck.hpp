#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "demf/tensor.hpp"

namespace demf {

struct GradReport {
  std::size_t coordinates = 0;
  // Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
  double max_rel_error = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double tolerance = 0.0;
  bool passed = false;
  std::string message;
};

// Compares reverse-mode gradients of the scalar `f` with central differences
// (f(x+h) - f(x-h)) / 2h over every coordinate of every input. `f` must read
// the inputs through the handles passed here; they are perturbed in place and
// restored afterwards.
GradReport grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs,
                      double h, double tol);

}  // namespace demf
