#include "demf/scene.hpp"

#include <algorithm>
#include <cmath>

#include "demf/error.hpp"
#include "demf/rng.hpp"

namespace demf {

namespace {

constexpr std::uint64_t kSceneStream = 0x5343454e45ULL;  // "SCENE"
constexpr double kMinCenterGap = 1.2;                     // meters between object centers
constexpr double kSizeJitter = 0.08;

}  // namespace

void SceneSpec::validate() const {
  if (num_classes < 2) throw SpecInvalid("scene spec needs at least 2 classes");
  if (objects_per_scene == 0) throw SpecInvalid("scene spec needs at least one object");
  if (objects_per_scene > 6) throw SpecInvalid("at most 6 objects fit the scene volume");
  if (!(ambiguity >= 0.0 && ambiguity <= 1.0)) throw SpecInvalid("ambiguity must lie in [0, 1]");
  if (!(clutter_fraction >= 0.0 && clutter_fraction < 1.0)) {
    throw SpecInvalid("clutter fraction must lie in [0, 1)");
  }
  if (image_width < 8 || image_height < 8) throw SpecInvalid("image must be at least 8x8");
  if (camera && (camera->width() != static_cast<double>(image_width) ||
                 camera->height() != static_cast<double>(image_height))) {
    throw SpecInvalid("camera extent differs from the image size");
  }
  const auto clutter = static_cast<std::size_t>(std::floor(clutter_fraction * static_cast<double>(num_points)));
  if ((num_points - clutter) / objects_per_scene < std::max<std::size_t>(min_points, 1)) {
    throw SpecInvalid("too few points for " + std::to_string(objects_per_scene) +
                      " objects with min_points " + std::to_string(min_points));
  }
}

bool has_partner(std::size_t class_id, std::size_t num_classes) {
  return (class_id ^ 1U) < num_classes;
}

std::size_t partner_class(std::size_t class_id, std::size_t num_classes) {
  return has_partner(class_id, num_classes) ? (class_id ^ 1U) : class_id;
}

std::size_t num_archetypes(std::size_t num_classes) { return num_classes + num_classes / 2; }

std::array<double, 3> archetype_size(std::size_t archetype, std::size_t num_classes) {
  // Hand-picked shapes for the default 4-class taxonomy: four distinct
  // per-class shapes followed by the two shared pair shapes.
  static constexpr std::array<std::array<double, 3>, 6> kDefault{{
      {0.80, 0.35, 0.35},
      {0.35, 0.80, 0.35},
      {0.35, 0.35, 0.80},
      {0.60, 0.60, 0.60},
      {0.70, 0.40, 0.70},
      {0.40, 0.70, 0.40},
  }};
  if (num_classes == 4) return kDefault.at(archetype);
  const double i = static_cast<double>(archetype + 1);
  auto frac = [](double v) { return v - std::floor(v); };
  return {0.3 + 0.5 * frac(i * 0.6180339887), 0.3 + 0.5 * frac(i * 0.4142135624),
          0.3 + 0.5 * frac(i * 0.7320508076)};
}

std::array<double, 3> class_color(std::size_t class_id, std::size_t num_classes) {
  static constexpr std::array<std::array<double, 3>, 4> kPalette{{
      {0.90, 0.20, 0.20},
      {0.20, 0.85, 0.25},
      {0.20, 0.30, 0.90},
      {0.90, 0.85, 0.20},
  }};
  if (num_classes <= 4) return kPalette.at(class_id);
  // Evenly spaced hues at full saturation.
  const double h = 6.0 * static_cast<double>(class_id) / static_cast<double>(num_classes);
  const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
  std::array<double, 3> rgb{};
  switch (static_cast<int>(h)) {
    case 0: rgb = {1, x, 0}; break;
    case 1: rgb = {x, 1, 0}; break;
    case 2: rgb = {0, 1, x}; break;
    case 3: rgb = {0, x, 1}; break;
    case 4: rgb = {x, 0, 1}; break;
    default: rgb = {1, 0, x}; break;
  }
  for (double& v : rgb) v = 0.15 + 0.8 * v;
  return rgb;
}

CameraModel scene_camera(const SceneSpec& spec) {
  if (spec.camera) return *spec.camera;
  const double w = static_cast<double>(spec.image_width);
  const double h = static_cast<double>(spec.image_height);
  return CameraModel::pinhole(0.9 * w, w / 2.0, h / 2.0, w, h);
}

namespace {

Point3 sample_on_box_surface(const Box3& box, Rng& rng) {
  const double sx = box.size[0], sy = box.size[1], sz = box.size[2];
  const double areas[3] = {sy * sz, sx * sz, sx * sy};  // faces normal to x, y, z
  const double total = areas[0] + areas[1] + areas[2];
  double pick = rng.uniform() * total;
  int axis = 0;
  while (axis < 2 && pick >= areas[axis]) pick -= areas[axis++];
  const double side = rng.uniform() < 0.5 ? -0.5 : 0.5;
  double local[3] = {rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};
  local[axis] = side;
  return {box.center.x + local[0] * sx, box.center.y + local[1] * sy, box.center.z + local[2] * sz};
}

bool projects_inside(const CameraModel& cam, const Point3& c) {
  const auto& psi = cam.psi();
  const double den = psi[6] * c.x + psi[7] * c.y + psi[8] * c.z;
  if (!(den > kProjectionEpsilon)) return false;
  const Pixel2 px = project(cam, c);
  return px.u >= 0.0 && px.u <= cam.width() && px.v >= 0.0 && px.v <= cam.height();
}

bool place_objects(const SceneSpec& spec, const CameraModel& cam, Rng& rng,
                   std::vector<Point3>& centers) {
  const double aspect = static_cast<double>(spec.image_height) / static_cast<double>(spec.image_width);
  centers.clear();
  for (std::size_t i = 0; i < spec.objects_per_scene; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const double z = rng.uniform(2.8, 4.8);
      const Point3 c{rng.uniform(-0.3, 0.3) * z, rng.uniform(-0.3, 0.3) * z * aspect, z};
      placed = projects_inside(cam, c) && std::all_of(centers.begin(), centers.end(), [&](const Point3& o) {
        const double dx = o.x - c.x, dy = o.y - c.y, dz = o.z - c.z;
        return dx * dx + dy * dy + dz * dz >= kMinCenterGap * kMinCenterGap;
      });
      if (placed) centers.push_back(c);
    }
    if (!placed) return false;
  }
  return true;
}

void render(ToyScene& scene, const SceneSpec& spec, Rng& rng) {
  const std::size_t w = spec.image_width, h = spec.image_height;
  std::vector<Real> pixels(3 * h * w);
  for (Real& p : pixels) p = static_cast<Real>(0.5 + rng.uniform(-0.05, 0.05));

  // Painter's algorithm: far objects first.
  std::vector<std::size_t> order(scene.gts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scene.gts[a].box.center.z > scene.gts[b].box.center.z;
  });
  for (std::size_t idx : order) {
    const GroundTruthBox& gt = scene.gts[idx];
    double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
    for (int corner = 0; corner < 8; ++corner) {
      const Point3 p{gt.box.center.x + ((corner & 1) ? 0.5 : -0.5) * gt.box.size[0],
                     gt.box.center.y + ((corner & 2) ? 0.5 : -0.5) * gt.box.size[1],
                     gt.box.center.z + ((corner & 4) ? 0.5 : -0.5) * gt.box.size[2]};
      const Pixel2 px = project(scene.cam, p);
      umin = std::min(umin, px.u);
      umax = std::max(umax, px.u);
      vmin = std::min(vmin, px.v);
      vmax = std::max(vmax, px.v);
    }
    const auto color = class_color(gt.class_id, spec.num_classes);
    const bool horizontal = gt.class_id % 2 == 1;
    for (std::size_t y = 0; y < h; ++y) {
      const double cy = static_cast<double>(y) + 0.5;
      if (cy < vmin || cy > vmax) continue;
      for (std::size_t x = 0; x < w; ++x) {
        const double cx = static_cast<double>(x) + 0.5;
        if (cx < umin || cx > umax) continue;
        const std::size_t phase = horizontal ? y : x;
        const double shade = (phase / 2) % 2 == 0 ? 1.0 : 0.7;
        for (std::size_t ch = 0; ch < 3; ++ch) {
          pixels[(ch * h + y) * w + x] = static_cast<Real>(color[ch] * shade);
        }
      }
    }
  }
  scene.image = Tensor({3, h, w}, std::move(pixels));
}

}  // namespace

ToyScene synth_scene(std::uint64_t seed, const SceneSpec& spec) {
  spec.validate();
  Rng rng(seed, kSceneStream);
  ToyScene scene{{}, {}, scene_camera(spec), {}, {}, {}};

  std::vector<Point3> centers;
  int tries = 0;
  while (!place_objects(spec, scene.cam, rng, centers)) {
    if (++tries == 1000) throw SpecInvalid("no object layout fits the camera view");
  }

  for (const Point3& c : centers) {
    GroundTruthBox gt;
    gt.class_id = static_cast<std::size_t>(rng.below(spec.num_classes));
    const bool ambiguous = has_partner(gt.class_id, spec.num_classes) && rng.uniform() < spec.ambiguity;
    const std::size_t archetype =
        ambiguous ? spec.num_classes + gt.class_id / 2 : gt.class_id;
    const auto nominal = archetype_size(archetype, spec.num_classes);
    gt.box.center = c;
    for (std::size_t a = 0; a < 3; ++a) {
      gt.box.size[a] = nominal[a] * (1.0 + rng.uniform(-kSizeJitter, kSizeJitter));
    }
    scene.gts.push_back(gt);
    scene.ambiguous.push_back(ambiguous ? 1 : 0);
    scene.archetype.push_back(archetype);
  }

  const auto clutter = static_cast<std::size_t>(
      std::floor(spec.clutter_fraction * static_cast<double>(spec.num_points)));
  const std::size_t per_object = (spec.num_points - clutter) / spec.objects_per_scene;
  const std::size_t remainder = spec.num_points - clutter - per_object * spec.objects_per_scene;
  scene.points.reserve(spec.num_points);
  for (std::size_t o = 0; o < scene.gts.size(); ++o) {
    const std::size_t count = per_object + (o < remainder ? 1 : 0);
    for (std::size_t i = 0; i < count; ++i) {
      scene.points.push_back(sample_on_box_surface(scene.gts[o].box, rng));
    }
  }
  for (std::size_t i = 0; i < clutter; ++i) {
    scene.points.push_back({rng.uniform(-1.6, 1.6), rng.uniform(-1.6, 1.6), rng.uniform(2.3, 5.3)});
  }
  // Fisher-Yates so that no object owns the first index.
  for (std::size_t i = scene.points.size(); i > 1; --i) {
    std::swap(scene.points[i - 1], scene.points[rng.below(i)]);
  }

  render(scene, spec, rng);
  return scene;
}

}  // namespace demf
