#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "demf/attention.hpp"
#include "demf/boxes.hpp"
#include "demf/geometry.hpp"
#include "demf/params.hpp"
#include "demf/rng.hpp"
#include "demf/tensor.hpp"

namespace demf {

// N candidate features (N, C) with their 3D coordinates.
struct PointFeatureSet {
  Tensor feats;
  std::vector<Point3> coords;

  std::size_t size() const { return coords.size(); }
};

struct DeMFConfig {
  std::size_t channels = 32;     // C
  std::size_t heads = 4;         // M
  std::size_t samples = 2;       // K
  std::size_t levels = 2;        // L (pyramid levels)
  std::size_t layers = 2;        // stacked DeMF layers
  std::size_t num_classes = 4;   // foreground classes; background is appended
  double dropout = 0.4;
  OffsetMode offset_mode = OffsetMode::learned;
  bool fusion = true;            // false drops the image cross-attention branch

  DeformAttnDims attn_dims() const { return {channels, heads, levels, samples}; }
  void validate() const;
};

// Length of the box parameterization vector fed to the positional embedding:
// center (3) followed by log-size (3).
inline constexpr std::size_t kBoxVectorSize = 6;

// Batched per-candidate predictions of one head.
struct HeadOutput {
  Tensor center;    // (N, 3) absolute, = coordinate + predicted offset
  Tensor log_size;  // (N, 3)
  Tensor logits;    // (N, num_classes + 1), background last

  Tensor box_vector() const;  // (N, 6)
};

// Two-layer MLP, hidden width C.
struct PredictionHead {
  Tensor w1, b1, w2, b2;

  static PredictionHead create(ParamStore& store, const std::string& prefix, std::size_t channels,
                               std::size_t num_classes, Rng& rng);
  HeadOutput apply(const Tensor& feats, const std::vector<Point3>& coords) const;
};

struct DeMFLayerParams {
  SelfAttnParams self_attn;
  std::optional<DeformAttnParams> cross_attn;  // empty when fusion is off
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;       // C -> 4C -> C
  Tensor norm1_gain, norm1_bias;
  Tensor norm2_gain, norm2_bias;               // undefined when fusion is off
  Tensor norm3_gain, norm3_bias;
  Tensor pos_weight, pos_bias;                 // box vector (6) -> C

  static DeMFLayerParams create(ParamStore& store, const std::string& prefix,
                                const DeMFConfig& cfg, Rng& rng);
};

// Layers 1..layers plus prediction heads 0..layers (head 0 reads the raw
// candidate features). No parameters are shared between layers or heads.
struct DeMFStack {
  DeMFConfig config;
  std::vector<DeMFLayerParams> layers;
  std::vector<PredictionHead> heads;

  static DeMFStack create(ParamStore& store, const DeMFConfig& cfg, Rng& rng);
};

struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout > 0
};

// One DeMF layer with post-residual layer norms:
//   z1 = LN(z + SelfAttn(z + pos, z))
//   z2 = LN(z1 + MSDeformAttn(z1 + pos, refs, pyramid))
//   z3 = LN(z2 + FFN(z2))
// Candidates with valid[i] == 0 receive no cross-attention contribution.
Tensor demf_layer(const Tensor& feats, std::span<const Unit2> refs,
                  std::span<const std::uint8_t> valid, const FeaturePyramid* pyramid,
                  const Tensor& pos, const DeMFLayerParams& params, const DeMFConfig& cfg,
                  ForwardContext& ctx);

struct LayerOutput {
  Tensor feats;
  HeadOutput boxes;
};

struct ReferencePoints {
  std::vector<Unit2> points;
  std::vector<std::uint8_t> valid;  // 0 where the projection is degenerate
};

// Projects every coordinate; degenerate projections get (0, 0) and a zero flag.
ReferencePoints reference_points(const CameraModel& cam, const std::vector<Point3>& coords);

// Entry l of the result holds head l's predictions; entry 0 is the base head
// on the input features. The box vector of layer l-1 (detached) drives the
// positional embedding of layer l.
std::vector<LayerOutput> demf_forward(const PointFeatureSet& pf, const CameraModel& cam,
                                      const FeaturePyramid* pyramid, const DeMFStack& stack,
                                      ForwardContext& ctx);

// Mean of the per-layer losses. Throws EmptyList.
Tensor total_loss(const std::vector<Tensor>& per_layer);
double total_loss(std::span<const double> per_layer);

struct LossWeights {
  double classification = 1.0;
  double center = 1.0;
  double size = 1.0;
  double assign_radius = 0.5;  // meters
};

inline constexpr std::size_t kUnassigned = std::numeric_limits<std::size_t>::max();

// Nearest ground-truth center within `radius` of each candidate coordinate
// (ties to the lower index), or kUnassigned.
std::vector<std::size_t> assign_candidates(const std::vector<Point3>& coords,
                                           const std::vector<GroundTruthBox>& gts, double radius);

// Cross-entropy over all candidates (unassigned ones target background) plus
// L1 on center and log-size averaged over assigned candidates.
Tensor detection_loss(const HeadOutput& preds, const std::vector<Point3>& coords,
                      const std::vector<GroundTruthBox>& gts, std::size_t num_classes,
                      const LossWeights& weights = {});

// Plain-value prediction for one candidate.
struct CandidatePrediction {
  Box3 box;
  std::vector<double> probs;  // num_classes + 1, background last
};

std::vector<CandidatePrediction> to_predictions(const HeadOutput& head);
// Averages class probabilities, centers and log-sizes over every head.
std::vector<CandidatePrediction> ensemble_predictions(const std::vector<LayerOutput>& outputs);

}  // namespace demf
