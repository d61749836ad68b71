#include "demf/model.hpp"

namespace demf {

namespace {

constexpr std::uint64_t kInitStream = 0x494e4954ULL;  // "INIT"

}  // namespace

ToyDetector::ToyDetector(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.demf.validate();
  Rng rng(seed, kInitStream);
  Rng point_rng = rng.fork(1);
  Rng image_rng = rng.fork(2);
  Rng stack_rng = rng.fork(3);
  point_encoder_ = PointEncoder::create(store_, config_.candidates, config_.demf.channels,
                                        config_.neighborhood_radius, point_rng);
  if (config_.demf.fusion) {
    image_encoder_ = ImageEncoder::create(store_, config_.demf.levels, config_.demf.channels, 3,
                                          image_rng);
    if (config_.freeze_image) {
      for (const Parameter& p : store_.params()) {
        if (p.group == "image_encoder") {
          Tensor t = p.tensor;
          t.set_requires_grad(false);
        }
      }
    }
  }
  stack_ = DeMFStack::create(store_, config_.demf, stack_rng);
}

ModelOutput ToyDetector::forward(const ToyScene& scene, ForwardContext& ctx) const {
  PointFeatureSet pf = point_encoder_.encode(scene.points);
  ModelOutput out;
  if (image_encoder_) {
    const FeaturePyramid pyramid = image_encoder_->encode(scene.image);
    out.layers = demf_forward(pf, scene.cam, &pyramid, stack_, ctx);
  } else {
    out.layers = demf_forward(pf, scene.cam, nullptr, stack_, ctx);
  }
  out.coords = std::move(pf.coords);
  return out;
}

std::vector<Tensor> ToyDetector::layer_losses(const ToyScene& scene, const ModelOutput& out,
                                              const LossWeights& weights) const {
  std::vector<Tensor> losses;
  losses.reserve(out.layers.size());
  for (const LayerOutput& layer : out.layers) {
    losses.push_back(
        detection_loss(layer.boxes, out.coords, scene.gts, config_.demf.num_classes, weights));
  }
  return losses;
}

std::vector<Parameter> ToyDetector::trainable() const {
  if (config_.freeze_image) return store_.params_in_groups({"image_encoder"});
  return store_.params_in_groups({});
}

}  // namespace demf
