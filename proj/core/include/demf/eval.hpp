#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <span>
#include <vector>

#include "demf/boxes.hpp"

namespace demf {

// Axis-aligned intersection over union.
double iou3d(const Box3& a, const Box3& b);

inline constexpr std::size_t kBackground = std::numeric_limits<std::size_t>::max();

// Greedy label assignment for the confusion matrix. Predictions are visited
// in descending score order (ties keep input order); each takes its
// highest-IoU ground truth when that IoU >= iou_thresh and the ground truth
// is still free, otherwise it goes to background. Class-agnostic.
// Result[i] is a ground-truth index or kBackground.
std::vector<std::size_t> confusion_assign(std::span<const Detection> preds,
                                          std::span<const GroundTruthBox> gts, double iou_thresh);

struct SceneResult {
  std::vector<Detection> detections;
  std::vector<GroundTruthBox> gts;
};

// (num_classes + 1)^2 counts. Row = ground-truth class, column = predicted
// class; index num_classes is background on both axes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes);

  std::size_t num_classes() const { return num_classes_; }
  std::size_t background() const { return num_classes_; }
  std::size_t at(std::size_t row, std::size_t col) const;
  void add(std::size_t row, std::size_t col, std::size_t count = 1);
  void merge(const ConfusionMatrix& other);
  std::size_t row_sum(std::size_t row) const;
  std::size_t total() const;

  // CSV with a header row; first column names the ground-truth row.
  void write_csv(std::ostream& out) const;

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t num_classes_;
  std::vector<std::size_t> counts_;
};

// Accumulates confusion_assign over scenes. Predictions scoring below
// score_threshold are dropped first. Ground truths left unmatched count in
// the background column of their class row.
ConfusionMatrix confusion_matrix(std::span<const SceneResult> scenes, std::size_t num_classes,
                                 double iou_thresh, double score_threshold = 0.0);

// Per-class AP with class-aware greedy matching and all-point interpolation
// (precision envelope over recall). Classes without ground truth get NaN.
std::vector<double> average_precision(std::span<const SceneResult> scenes,
                                      std::size_t num_classes, double iou_thresh);
// Mean over classes that have ground truth.
double mean_average_precision(std::span<const double> per_class_ap);

// All-point interpolated area under a PR curve given per-detection TP flags
// in score order.
double interpolated_ap(std::span<const std::uint8_t> tp_in_score_order, std::size_t num_gts);

}  // namespace demf
