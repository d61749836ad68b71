#pragma once

#include <array>
#include <cstddef>

#include "demf/geometry.hpp"

namespace demf {

// Axis-aligned box: center and full extents along x, y, z (meters).
struct Box3 {
  Point3 center;
  std::array<double, 3> size{1.0, 1.0, 1.0};
};

struct GroundTruthBox {
  Box3 box;
  std::size_t class_id = 0;
};

struct Detection {
  Box3 box;
  std::size_t class_id = 0;
  double score = 0.0;
};

}  // namespace demf
