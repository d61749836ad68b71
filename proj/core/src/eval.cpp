#include "demf/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "demf/error.hpp"

namespace demf {

double iou3d(const Box3& a, const Box3& b) {
  const double ca[3] = {a.center.x, a.center.y, a.center.z};
  const double cb[3] = {b.center.x, b.center.y, b.center.z};
  double inter = 1.0;
  for (int k = 0; k < 3; ++k) {
    const double lo = std::max(ca[k] - a.size[k] / 2, cb[k] - b.size[k] / 2);
    const double hi = std::min(ca[k] + a.size[k] / 2, cb[k] + b.size[k] / 2);
    if (hi <= lo) return 0.0;
    inter *= hi - lo;
  }
  const double va = a.size[0] * a.size[1] * a.size[2];
  const double vb = b.size[0] * b.size[1] * b.size[2];
  // Summing the volumes in a fixed order keeps iou3d(a,b) == iou3d(b,a).
  const double uni = std::min(va, vb) + std::max(va, vb) - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

namespace {

std::vector<std::size_t> score_order(std::span<const Detection> preds) {
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return preds[a].score > preds[b].score;
  });
  return order;
}

}  // namespace

std::vector<std::size_t> confusion_assign(std::span<const Detection> preds,
                                          std::span<const GroundTruthBox> gts, double iou_thresh) {
  std::vector<std::size_t> assignment(preds.size(), kBackground);
  std::vector<bool> used(gts.size(), false);
  if (gts.empty()) return assignment;
  for (std::size_t i : score_order(preds)) {
    std::size_t best = 0;
    double best_iou = -1.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou3d(preds[i].box, gts[g].box);
      if (v > best_iou) {
        best_iou = v;
        best = g;
      }
    }
    if (best_iou >= iou_thresh && !used[best]) {
      assignment[i] = best;
      used[best] = true;
    }
  }
  return assignment;
}

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes)
    : num_classes_(num_classes), counts_((num_classes + 1) * (num_classes + 1), 0) {}

std::size_t ConfusionMatrix::at(std::size_t row, std::size_t col) const {
  return counts_.at(row * (num_classes_ + 1) + col);
}

void ConfusionMatrix::add(std::size_t row, std::size_t col, std::size_t count) {
  if (row > num_classes_ || col > num_classes_) throw Error("confusion matrix index out of range");
  counts_[row * (num_classes_ + 1) + col] += count;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.num_classes_ != num_classes_) throw Error("merging confusion matrices of different size");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::size_t ConfusionMatrix::row_sum(std::size_t row) const {
  std::size_t s = 0;
  for (std::size_t c = 0; c <= num_classes_; ++c) s += at(row, c);
  return s;
}

std::size_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::size_t{0});
}

void ConfusionMatrix::write_csv(std::ostream& out) const {
  out << "gt\\pred";
  for (std::size_t c = 0; c < num_classes_; ++c) out << ",class" << c;
  out << ",background\n";
  for (std::size_t r = 0; r <= num_classes_; ++r) {
    if (r == num_classes_) {
      out << "background";
    } else {
      out << "class" << r;
    }
    for (std::size_t c = 0; c <= num_classes_; ++c) out << ',' << at(r, c);
    out << '\n';
  }
}

ConfusionMatrix confusion_matrix(std::span<const SceneResult> scenes, std::size_t num_classes,
                                 double iou_thresh, double score_threshold) {
  ConfusionMatrix cm(num_classes);
  for (const SceneResult& scene : scenes) {
    std::vector<Detection> kept;
    for (const Detection& d : scene.detections)
      if (d.score >= score_threshold) kept.push_back(d);
    const auto assignment = confusion_assign(kept, scene.gts, iou_thresh);
    std::vector<bool> matched(scene.gts.size(), false);
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (assignment[i] == kBackground) {
        cm.add(cm.background(), kept[i].class_id);
      } else {
        matched[assignment[i]] = true;
        cm.add(scene.gts[assignment[i]].class_id, kept[i].class_id);
      }
    }
    for (std::size_t g = 0; g < scene.gts.size(); ++g)
      if (!matched[g]) cm.add(scene.gts[g].class_id, cm.background());
  }
  return cm;
}

double interpolated_ap(std::span<const std::uint8_t> tp, std::size_t num_gts) {
  if (num_gts == 0) return std::nan("");
  const std::size_t n = tp.size();
  std::vector<double> recall(n), precision(n);
  std::size_t tps = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tps += tp[i] ? 1 : 0;
    recall[i] = static_cast<double>(tps) / static_cast<double>(num_gts);
    precision[i] = static_cast<double>(tps) / static_cast<double>(i + 1);
  }
  // Envelope: precision at rank i becomes the best precision at any rank >= i.
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (recall[i] > prev_recall) {
      ap += (recall[i] - prev_recall) * precision[i];
      prev_recall = recall[i];
    }
  }
  return ap;
}

std::vector<double> average_precision(std::span<const SceneResult> scenes,
                                      std::size_t num_classes, double iou_thresh) {
  std::vector<double> ap(num_classes, std::nan(""));
  for (std::size_t cls = 0; cls < num_classes; ++cls) {
    struct Entry {
      double score;
      std::size_t scene;
      const Detection* det;
    };
    std::vector<Entry> entries;
    std::size_t num_gts = 0;
    for (std::size_t s = 0; s < scenes.size(); ++s) {
      for (const Detection& d : scenes[s].detections)
        if (d.class_id == cls) entries.push_back({d.score, s, &d});
      for (const GroundTruthBox& g : scenes[s].gts)
        if (g.class_id == cls) ++num_gts;
    }
    if (num_gts == 0) continue;
    std::stable_sort(entries.begin(), entries.end(),
                     [](const Entry& a, const Entry& b) { return a.score > b.score; });

    std::vector<std::vector<bool>> used(scenes.size());
    for (std::size_t s = 0; s < scenes.size(); ++s) used[s].assign(scenes[s].gts.size(), false);
    std::vector<std::uint8_t> tp(entries.size(), 0);
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& gts = scenes[entries[i].scene].gts;
      double best_iou = -1.0;
      std::size_t best = 0;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (gts[g].class_id != cls) continue;
        const double v = iou3d(entries[i].det->box, gts[g].box);
        if (v > best_iou) {
          best_iou = v;
          best = g;
        }
      }
      if (best_iou >= iou_thresh && !used[entries[i].scene][best]) {
        used[entries[i].scene][best] = true;
        tp[i] = 1;
      }
    }
    ap[cls] = interpolated_ap(tp, num_gts);
  }
  return ap;
}

double mean_average_precision(std::span<const double> per_class_ap) {
  double total = 0.0;
  std::size_t n = 0;
  for (double v : per_class_ap) {
    if (std::isnan(v)) continue;
    total += v;
    ++n;
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

}  // namespace demf
