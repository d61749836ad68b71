#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "demf/boxes.hpp"
#include "demf/geometry.hpp"
#include "demf/tensor.hpp"

namespace demf {

// Parameters of the synthetic scene generator.
struct SceneSpec {
  std::size_t num_classes = 4;
  std::size_t objects_per_scene = 3;
  // Probability that an object (of a class with a partner) takes the point
  // archetype it shares with its partner class instead of its own.
  double ambiguity = 1.0;
  std::size_t num_points = 2048;   // N0
  std::size_t image_width = 64;    // W0
  std::size_t image_height = 64;   // H0
  double clutter_fraction = 0.05;
  std::size_t min_points = 64;     // per object
  // Replaces the default pinhole; its extent must equal the image size.
  std::optional<CameraModel> camera;

  void validate() const;  // throws SpecInvalid
};

// Classes 2j and 2j+1 form an ambiguous pair; with an odd class count the
// last class has no partner.
std::size_t partner_class(std::size_t class_id, std::size_t num_classes);
bool has_partner(std::size_t class_id, std::size_t num_classes);

// Nominal extents of a point archetype. Archetypes [0, num_classes) are the
// per-class shapes; num_classes + j is the shape shared by pair j.
std::array<double, 3> archetype_size(std::size_t archetype, std::size_t num_classes);
std::size_t num_archetypes(std::size_t num_classes);

// RGB texture color of a class.
std::array<double, 3> class_color(std::size_t class_id, std::size_t num_classes);

struct ToyScene {
  std::vector<Point3> points;             // camera frame, meters
  Tensor image;                           // (3, H0, W0), values in [0, 1]
  CameraModel cam;
  std::vector<GroundTruthBox> gts;
  std::vector<std::uint8_t> ambiguous;    // per gt: drawn with a shared archetype
  std::vector<std::size_t> archetype;     // per gt
};

// spec.camera if set, else a pinhole with f = 0.9 W0 and the principal
// point at the image center.
CameraModel scene_camera(const SceneSpec& spec);

// Deterministic in (seed, spec).
ToyScene synth_scene(std::uint64_t seed, const SceneSpec& spec);

}  // namespace demf
