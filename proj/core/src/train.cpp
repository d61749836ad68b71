#include "demf/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "demf/error.hpp"
#include "demf/interchange.hpp"
#include "demf/ops.hpp"

namespace demf {

namespace {

constexpr std::uint64_t kDropoutStream = 0x44524f50ULL;  // "DROP"

std::size_t argmax_foreground(const std::vector<double>& probs) {
  const std::size_t k = probs.size() - 1;
  return static_cast<std::size_t>(std::max_element(probs.begin(), probs.begin() + k) - probs.begin());
}

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

double EvalMetrics::ambiguous_accuracy() const {
  return ratio(ambiguous_correct, ambiguous_candidates);
}

double EvalMetrics::accuracy() const { return ratio(assigned_correct, assigned_candidates); }

std::vector<Detection> detections_from(const std::vector<CandidatePrediction>& preds,
                                       double nms_iou) {
  std::vector<Detection> all;
  all.reserve(preds.size());
  for (const CandidatePrediction& p : preds) {
    const std::size_t c = argmax_foreground(p.probs);
    all.push_back({p.box, c, p.probs[c]});
  }
  if (!(nms_iou > 0.0)) return all;

  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return all[a].score > all[b].score; });
  std::vector<Detection> kept;
  for (std::size_t i : order) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.class_id == all[i].class_id && iou3d(k.box, all[i].box) > nms_iou;
    });
    if (!suppressed) kept.push_back(all[i]);
  }
  return kept;
}

EvalMetrics evaluate(const ToyDetector& model, const SceneSpec& spec, const EvalSettings& settings) {
  NoGradGuard no_grad;
  const std::size_t num_classes = model.config().demf.num_classes;
  if (spec.num_classes != num_classes) {
    throw ConfigInvalid("scene classes " + std::to_string(spec.num_classes) +
                        " differ from model classes " + std::to_string(num_classes));
  }
  EvalMetrics metrics;
  std::vector<SceneResult> results;
  results.reserve(settings.scenes);
  ForwardContext ctx{false, nullptr};
  for (std::size_t s = 0; s < settings.scenes; ++s) {
    const ToyScene scene = synth_scene(settings.scene_seed + s, spec);
    const ModelOutput out = model.forward(scene, ctx);
    const std::vector<CandidatePrediction> preds =
        settings.ensemble ? ensemble_predictions(out.layers) : to_predictions(out.layers.back().boxes);

    const auto assigned = assign_candidates(out.coords, scene.gts, settings.assign_radius);
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (assigned[i] == kUnassigned) continue;
      const bool correct = argmax_foreground(preds[i].probs) == scene.gts[assigned[i]].class_id;
      ++metrics.assigned_candidates;
      metrics.assigned_correct += correct ? 1 : 0;
      if (scene.ambiguous[assigned[i]] != 0) {
        ++metrics.ambiguous_candidates;
        metrics.ambiguous_correct += correct ? 1 : 0;
      }
    }
    results.push_back({detections_from(preds, settings.nms_iou), scene.gts});
  }
  for (double iou : settings.iou_thresholds) {
    metrics.ap.push_back(average_precision(results, num_classes, iou));
    metrics.map.push_back(mean_average_precision(metrics.ap.back()));
  }
  const double confusion_iou = settings.iou_thresholds.empty() ? 0.25 : settings.iou_thresholds.front();
  metrics.confusion =
      confusion_matrix(results, num_classes, confusion_iou, settings.score_threshold);
  return metrics;
}

void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& rows, std::size_t num_layers) {
  out << "# demf metrics v" << kMetricsSchemaVersion << "\n";
  out << "step";
  for (std::size_t l = 0; l < num_layers; ++l) out << ",loss_layer" << l;
  out << ",loss_total,eval_ambiguous_accuracy,eval_map25\n";
  for (const TraceRow& r : rows) {
    out << r.step;
    for (double v : r.layer_losses) out << ',' << format_real(v);
    out << ',' << format_real(r.total);
    if (r.has_eval) {
      out << ',' << format_real(r.ambiguous_accuracy) << ',' << format_real(r.map25);
    } else {
      out << ",,";
    }
    out << '\n';
  }
}

std::uint64_t training_scene_seed(const TrainSettings& settings, std::size_t i) {
  if (settings.scene_pool > 0) i %= settings.scene_pool;
  return settings.scene_seed + i;
}

std::vector<TraceRow> train(ToyDetector& model, const SceneSpec& spec,
                            const TrainSettings& settings, const EvalSettings& eval,
                            std::uint64_t seed) {
  if (settings.batch == 0) throw ConfigInvalid("batch must be positive");
  if (spec.num_classes != model.config().demf.num_classes) {
    throw ConfigInvalid("scene classes differ from model classes");
  }
  AdamW optimizer(model.trainable(), settings.optimizer, settings.lr_multipliers);
  Rng dropout_rng(seed, kDropoutStream);
  ForwardContext ctx{true, &dropout_rng};
  const std::size_t heads = model.config().demf.layers + 1;
  const double inv_batch = 1.0 / static_cast<double>(settings.batch);

  std::vector<TraceRow> trace;
  auto add_eval = [&](TraceRow& row) {
    const EvalMetrics m = evaluate(model, spec, eval);
    row.has_eval = true;
    row.ambiguous_accuracy = m.ambiguous_accuracy();
    row.map25 = m.map.empty() ? 0.0 : m.map.front();
  };

  for (std::size_t step = 0; step < settings.steps; ++step) {
    optimizer.zero_grad();
    Tensor batch_loss;
    std::vector<double> layer_sums(heads, 0.0);
    for (std::size_t b = 0; b < settings.batch; ++b) {
      const ToyScene scene = synth_scene(training_scene_seed(settings, step * settings.batch + b), spec);
      const ModelOutput out = model.forward(scene, ctx);
      const std::vector<Tensor> losses = model.layer_losses(scene, out, settings.loss);
      for (std::size_t l = 0; l < heads; ++l) layer_sums[l] += losses[l].item() * inv_batch;
      const Tensor scene_loss = scale(total_loss(losses), inv_batch);
      batch_loss = batch_loss.defined() ? add(batch_loss, scene_loss) : scene_loss;
    }
    const double total = batch_loss.item();
    if (!std::isfinite(total)) throw NonFiniteLoss(step);
    batch_loss.backward();
    optimizer.step();

    const bool last = step + 1 == settings.steps;
    const bool log = last || (settings.log_every > 0 && step % settings.log_every == 0);
    const bool do_eval =
        last || (settings.eval_every > 0 && (step + 1) % settings.eval_every == 0);
    if (log || do_eval) {
      TraceRow row;
      row.step = step;
      row.layer_losses = layer_sums;
      row.total = total;
      if (do_eval && eval.scenes > 0) add_eval(row);
      trace.push_back(std::move(row));
    }
  }
  return trace;
}

}  // namespace demf
