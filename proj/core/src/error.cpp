#include "demf/error.hpp"

#include <sstream>

namespace demf {

std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

ShapeMismatch::ShapeMismatch(const std::string& op, const std::vector<std::size_t>& a,
                             const std::vector<std::size_t>& b)
    : Error(op + ": shape mismatch " + shape_to_string(a) + " vs " + shape_to_string(b)) {}

DegenerateProjection::DegenerateProjection(double denominator)
    : Error("degenerate projection: denominator " + std::to_string(denominator) +
            " puts the point on or behind the camera plane"),
      denominator_(denominator) {}

NonScalarLoss::NonScalarLoss(const std::vector<std::size_t>& shape)
    : Error("backward requires a scalar loss, got shape " + shape_to_string(shape)) {}

MissingGrad::MissingGrad(const std::string& param_name)
    : Error("parameter '" + param_name + "' has no gradient") {}

LevelMismatch::LevelMismatch(std::size_t expected, std::size_t got)
    : Error("level mismatch: parameters expect " + std::to_string(expected) +
            " levels, pyramid has " + std::to_string(got)) {}

NonSquareK::NonSquareK(std::size_t k)
    : Error("grid sampling needs a perfect-square sample count, got K = " + std::to_string(k)) {}

NonFiniteLoss::NonFiniteLoss(std::size_t step)
    : Error("non-finite loss at step " + std::to_string(step)), step_(step) {}

}  // namespace demf
