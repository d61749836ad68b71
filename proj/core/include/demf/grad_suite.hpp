#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "demf/gradcheck.hpp"

namespace demf {

struct GradSuiteSettings {
  std::size_t seeds = 20;
  double h = 1e-5;
  double tolerance = 1e-6;
  std::uint64_t base_seed = 0;
  std::vector<std::string> ops;  // empty: every op in grad_suite_ops()
};

struct GradCase {
  std::string op;
  std::uint64_t seed = 0;
  GradReport report;
};

// Ops in suite order: diffcore primitives, then the attention stack.
const std::vector<std::string>& grad_suite_ops();

// One randomized instance of `op`. Attention instances place their samples
// inside cells, away from the grid lines where the bilinear sampler has no
// derivative; the rare instance that still comes within 0.05 cells of one is
// redrawn from the same seed stream.
GradCase run_grad_case(const std::string& op, std::uint64_t seed, double h, double tol);

std::vector<GradCase> run_grad_suite(const GradSuiteSettings& settings,
                                     const std::function<void(const GradCase&)>& on_case = {});

}  // namespace demf
