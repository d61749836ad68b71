#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "demf/demf.hpp"
#include "demf/encoders.hpp"
#include "demf/params.hpp"
#include "demf/scene.hpp"

namespace demf {

struct ModelConfig {
  DeMFConfig demf;
  std::size_t candidates = 32;       // N
  double neighborhood_radius = 0.6;  // meters, point-encoder statistics
  bool freeze_image = false;         // image encoder excluded from the optimizer
};

struct ModelOutput {
  std::vector<Point3> coords;        // candidate coordinates shared by every head
  std::vector<LayerOutput> layers;   // head 0 .. head L
};

// Point encoder + (optional) image encoder + DeMF stack with per-layer
// heads. With demf.fusion == false the image branch does not exist at all.
class ToyDetector {
 public:
  ToyDetector(const ModelConfig& config, std::uint64_t seed);

  ToyDetector(const ToyDetector&) = delete;
  ToyDetector& operator=(const ToyDetector&) = delete;
  ToyDetector(ToyDetector&&) = default;
  ToyDetector& operator=(ToyDetector&&) = default;

  ModelOutput forward(const ToyScene& scene, ForwardContext& ctx) const;
  // Per-layer detection losses (head 0 .. head L).
  std::vector<Tensor> layer_losses(const ToyScene& scene, const ModelOutput& out,
                                   const LossWeights& weights) const;

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  // Parameters handed to the optimizer (frozen groups removed).
  std::vector<Parameter> trainable() const;

 private:
  ModelConfig config_;
  ParamStore store_;
  PointEncoder point_encoder_;
  std::optional<ImageEncoder> image_encoder_;
  DeMFStack stack_;
};

}  // namespace demf
