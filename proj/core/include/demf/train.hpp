#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "demf/demf.hpp"
#include "demf/eval.hpp"
#include "demf/model.hpp"
#include "demf/optim.hpp"
#include "demf/scene.hpp"

namespace demf {

struct TrainSettings {
  std::size_t steps = 1500;
  std::size_t batch = 4;            // scenes per optimizer step
  std::uint64_t scene_seed = 1000;  // training scenes are scene_seed + i
  // 0 streams fresh scenes; otherwise cycles through this many.
  std::size_t scene_pool = 0;
  AdamWOptions optimizer;
  std::map<std::string, double> lr_multipliers;  // by parameter group
  LossWeights loss;
  std::size_t log_every = 50;
  std::size_t eval_every = 0;       // 0: evaluate only after the last step
};

struct EvalSettings {
  std::uint64_t scene_seed = 900000;  // held-out range, disjoint from training
  std::size_t scenes = 100;
  std::vector<double> iou_thresholds{0.25, 0.5};
  bool ensemble = false;              // average every head instead of the last
  double nms_iou = 0.25;              // per-class suppression before AP; 0 disables
  double score_threshold = 0.0;       // confusion-matrix filter
  double assign_radius = 0.5;         // candidate -> gt for the accuracy metrics
};

struct EvalMetrics {
  std::size_t ambiguous_candidates = 0;
  std::size_t ambiguous_correct = 0;
  std::size_t assigned_candidates = 0;
  std::size_t assigned_correct = 0;
  std::vector<double> map;                 // one per iou threshold
  std::vector<std::vector<double>> ap;     // [threshold][class]
  ConfusionMatrix confusion{1};

  double ambiguous_accuracy() const;
  double accuracy() const;
};

// Class = argmax over foreground probabilities, score = that probability.
std::vector<Detection> detections_from(const std::vector<CandidatePrediction>& preds,
                                       double nms_iou);

EvalMetrics evaluate(const ToyDetector& model, const SceneSpec& spec, const EvalSettings& settings);

struct TraceRow {
  std::size_t step = 0;
  std::vector<double> layer_losses;  // head 0 .. head L, batch mean
  double total = 0.0;
  bool has_eval = false;
  double ambiguous_accuracy = 0.0;
  double map25 = 0.0;
};

inline constexpr int kMetricsSchemaVersion = 1;
void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& rows, std::size_t num_layers);

// Scene seed of training example i.
std::uint64_t training_scene_seed(const TrainSettings& settings, std::size_t i);

// Runs the optimization loop in place. Throws NonFiniteLoss with the step
// index. Eval rows use `eval` on the held-out range.
std::vector<TraceRow> train(ToyDetector& model, const SceneSpec& spec,
                            const TrainSettings& settings, const EvalSettings& eval,
                            std::uint64_t seed);

}  // namespace demf
