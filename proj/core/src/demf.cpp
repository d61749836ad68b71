#include "demf/demf.hpp"

#include <cmath>
#include <numeric>

#include "demf/error.hpp"
#include "demf/ops.hpp"

namespace demf {

void DeMFConfig::validate() const {
  if (channels == 0 || heads == 0 || channels % heads != 0) {
    throw ConfigInvalid("channels must be a positive multiple of heads");
  }
  if (samples == 0 || levels == 0) throw ConfigInvalid("samples and levels must be positive");
  if (num_classes == 0) throw ConfigInvalid("num_classes must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigInvalid("dropout must lie in [0, 1)");
  if (fusion && offset_mode == OffsetMode::grid) grid_offsets(attn_dims());
}

Tensor HeadOutput::box_vector() const { return concat({center, log_size}, 1); }

PredictionHead PredictionHead::create(ParamStore& store, const std::string& prefix,
                                      std::size_t channels, std::size_t num_classes, Rng& rng) {
  PredictionHead h;
  const std::size_t out = kBoxVectorSize + num_classes + 1;
  h.w1 = store.uniform(prefix + ".fc1.weight", {channels, channels}, channels, rng, "heads");
  h.b1 = store.zeros(prefix + ".fc1.bias", {channels}, "heads");
  h.w2 = store.uniform(prefix + ".fc2.weight", {channels, out}, channels, rng, "heads");
  h.b2 = store.zeros(prefix + ".fc2.bias", {out}, "heads");
  return h;
}

namespace {

Tensor coords_tensor(const std::vector<Point3>& coords) {
  std::vector<Real> values;
  values.reserve(coords.size() * 3);
  for (const Point3& p : coords) {
    values.push_back(static_cast<Real>(p.x));
    values.push_back(static_cast<Real>(p.y));
    values.push_back(static_cast<Real>(p.z));
  }
  return Tensor({coords.size(), 3}, std::move(values));
}

}  // namespace

HeadOutput PredictionHead::apply(const Tensor& feats, const std::vector<Point3>& coords) const {
  if (feats.rank() != 2 || feats.dim(0) != coords.size()) {
    throw ShapeMismatch("prediction head", feats.shape(), {coords.size()});
  }
  const Tensor raw = linear(relu(linear(feats, w1, b1)), w2, b2);
  const std::size_t width = raw.dim(1);
  HeadOutput out;
  out.center = add(narrow(raw, 1, 0, 3), coords_tensor(coords));
  out.log_size = narrow(raw, 1, 3, 3);
  out.logits = narrow(raw, 1, kBoxVectorSize, width - kBoxVectorSize);
  return out;
}

DeMFLayerParams DeMFLayerParams::create(ParamStore& store, const std::string& prefix,
                                        const DeMFConfig& cfg, Rng& rng) {
  const std::size_t c = cfg.channels;
  DeMFLayerParams p;
  p.self_attn = SelfAttnParams::create(store, prefix + ".self_attn", c, cfg.heads, rng, "demf");
  if (cfg.fusion) {
    p.cross_attn = DeformAttnParams::create(store, prefix + ".cross_attn", cfg.attn_dims(),
                                            cfg.offset_mode, rng, "demf");
  }
  p.ffn_w1 = store.uniform(prefix + ".ffn.fc1.weight", {c, 4 * c}, c, rng, "demf");
  p.ffn_b1 = store.zeros(prefix + ".ffn.fc1.bias", {4 * c}, "demf");
  p.ffn_w2 = store.uniform(prefix + ".ffn.fc2.weight", {4 * c, c}, 4 * c, rng, "demf");
  p.ffn_b2 = store.zeros(prefix + ".ffn.fc2.bias", {c}, "demf");
  p.norm1_gain = store.full(prefix + ".norm1.gain", {c}, Real{1}, "demf");
  p.norm1_bias = store.zeros(prefix + ".norm1.bias", {c}, "demf");
  if (cfg.fusion) {
    p.norm2_gain = store.full(prefix + ".norm2.gain", {c}, Real{1}, "demf");
    p.norm2_bias = store.zeros(prefix + ".norm2.bias", {c}, "demf");
  }
  p.norm3_gain = store.full(prefix + ".norm3.gain", {c}, Real{1}, "demf");
  p.norm3_bias = store.zeros(prefix + ".norm3.bias", {c}, "demf");
  p.pos_weight = store.uniform(prefix + ".pos_embed.weight", {kBoxVectorSize, c}, kBoxVectorSize,
                               rng, "demf");
  p.pos_bias = store.zeros(prefix + ".pos_embed.bias", {c}, "demf");
  return p;
}

DeMFStack DeMFStack::create(ParamStore& store, const DeMFConfig& cfg, Rng& rng) {
  cfg.validate();
  DeMFStack s;
  s.config = cfg;
  s.heads.push_back(PredictionHead::create(store, "head0", cfg.channels, cfg.num_classes, rng));
  for (std::size_t l = 1; l <= cfg.layers; ++l) {
    s.layers.push_back(DeMFLayerParams::create(store, "demf" + std::to_string(l), cfg, rng));
    s.heads.push_back(PredictionHead::create(store, "head" + std::to_string(l), cfg.channels,
                                             cfg.num_classes, rng));
  }
  return s;
}

namespace {

Tensor attention_dropout(const Tensor& x, const DeMFConfig& cfg, ForwardContext& ctx) {
  if (!ctx.training || cfg.dropout == 0.0) return x;
  if (ctx.rng == nullptr) throw Error("training forward with dropout needs an rng");
  return dropout(x, static_cast<Real>(cfg.dropout), true, *ctx.rng);
}

}  // namespace

Tensor demf_layer(const Tensor& feats, std::span<const Unit2> refs,
                  std::span<const std::uint8_t> valid, const FeaturePyramid* pyramid,
                  const Tensor& pos, const DeMFLayerParams& params, const DeMFConfig& cfg,
                  ForwardContext& ctx) {
  if (feats.rank() != 2 || feats.dim(1) != cfg.channels || refs.size() != feats.dim(0)) {
    throw ShapeMismatch("demf_layer", feats.shape(), {refs.size(), cfg.channels});
  }
  const Tensor attended = attention_dropout(self_attn(feats, pos, params.self_attn), cfg, ctx);
  Tensor z = layer_norm(add(feats, attended), params.norm1_gain, params.norm1_bias);

  if (params.cross_attn.has_value()) {
    if (pyramid == nullptr) throw Error("fusion layer needs an image feature pyramid");
    const Tensor fused = attention_dropout(
        ms_deform_attn(add(z, pos), refs, *pyramid, *params.cross_attn, valid), cfg, ctx);
    z = layer_norm(add(z, fused), params.norm2_gain, params.norm2_bias);
  }

  const Tensor ffn = linear(relu(linear(z, params.ffn_w1, params.ffn_b1)), params.ffn_w2,
                            params.ffn_b2);
  return layer_norm(add(z, ffn), params.norm3_gain, params.norm3_bias);
}

ReferencePoints reference_points(const CameraModel& cam, const std::vector<Point3>& coords) {
  ReferencePoints out;
  out.points.reserve(coords.size());
  out.valid.reserve(coords.size());
  for (const Point3& s : coords) {
    try {
      out.points.push_back(ref_point(cam, s));
      out.valid.push_back(1);
    } catch (const DegenerateProjection&) {
      out.points.push_back({0.0, 0.0});
      out.valid.push_back(0);
    }
  }
  return out;
}

std::vector<LayerOutput> demf_forward(const PointFeatureSet& pf, const CameraModel& cam,
                                      const FeaturePyramid* pyramid, const DeMFStack& stack,
                                      ForwardContext& ctx) {
  if (pf.feats.rank() != 2 || pf.feats.dim(0) != pf.size() ||
      pf.feats.dim(1) != stack.config.channels) {
    throw ShapeMismatch("demf_forward features", pf.feats.shape(),
                        {pf.size(), stack.config.channels});
  }
  const ReferencePoints refs = reference_points(cam, pf.coords);

  std::vector<LayerOutput> outputs;
  outputs.reserve(stack.layers.size() + 1);
  outputs.push_back({pf.feats, stack.heads[0].apply(pf.feats, pf.coords)});
  for (std::size_t l = 0; l < stack.layers.size(); ++l) {
    const DeMFLayerParams& layer = stack.layers[l];
    const Tensor spatial = outputs.back().boxes.box_vector().detach();
    const Tensor pos = linear(spatial, layer.pos_weight, layer.pos_bias);
    Tensor feats = demf_layer(outputs.back().feats, refs.points, refs.valid, pyramid, pos, layer,
                              stack.config, ctx);
    HeadOutput boxes = stack.heads[l + 1].apply(feats, pf.coords);
    outputs.push_back({std::move(feats), std::move(boxes)});
  }
  return outputs;
}

Tensor total_loss(const std::vector<Tensor>& per_layer) {
  if (per_layer.empty()) throw EmptyList("total_loss of an empty list");
  for (const Tensor& t : per_layer) {
    if (t.numel() != 1) throw NonScalarLoss(t.shape());
  }
  // Mean of deviations from the first entry: identical losses stay exact.
  const Real first = per_layer.front().item();
  Real acc = 0;
  for (const Tensor& t : per_layer) acc += t.item() - first;
  const auto n = static_cast<Real>(per_layer.size());
  return make_result({}, {first + acc / n}, per_layer, [n](const detail::Node& out) {
    for (const auto& parent : out.parents) {
      if (!parent->requires_grad) continue;
      parent->ensure_grad()[0] += out.grad[0] / n;
    }
  });
}

double total_loss(std::span<const double> per_layer) {
  if (per_layer.empty()) throw EmptyList("total_loss of an empty list");
  double acc = 0.0;
  for (double v : per_layer) acc += v - per_layer.front();
  return per_layer.front() + acc / static_cast<double>(per_layer.size());
}

std::vector<std::size_t> assign_candidates(const std::vector<Point3>& coords,
                                           const std::vector<GroundTruthBox>& gts, double radius) {
  std::vector<std::size_t> out(coords.size(), kUnassigned);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    double best = radius * radius;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const Point3& c = gts[g].box.center;
      const double dx = coords[i].x - c.x, dy = coords[i].y - c.y, dz = coords[i].z - c.z;
      const double d2 = dx * dx + dy * dy + dz * dz;
      if (d2 < best || (d2 == best && out[i] == kUnassigned)) {
        best = d2;
        out[i] = g;
      }
    }
  }
  return out;
}

Tensor detection_loss(const HeadOutput& preds, const std::vector<Point3>& coords,
                      const std::vector<GroundTruthBox>& gts, std::size_t num_classes,
                      const LossWeights& weights) {
  const std::size_t n = coords.size();
  if (preds.logits.rank() != 2 || preds.logits.dim(0) != n ||
      preds.logits.dim(1) != num_classes + 1) {
    throw ShapeMismatch("detection_loss logits", preds.logits.shape(), {n, num_classes + 1});
  }
  const std::vector<std::size_t> assigned = assign_candidates(coords, gts, weights.assign_radius);

  std::vector<std::size_t> targets(n, num_classes);
  std::vector<std::size_t> rows;
  std::vector<Real> center_target, size_target;
  for (std::size_t i = 0; i < n; ++i) {
    if (assigned[i] == kUnassigned) continue;
    const GroundTruthBox& gt = gts[assigned[i]];
    targets[i] = gt.class_id;
    rows.push_back(i);
    center_target.insert(center_target.end(),
                         {static_cast<Real>(gt.box.center.x), static_cast<Real>(gt.box.center.y),
                          static_cast<Real>(gt.box.center.z)});
    for (double s : gt.box.size) size_target.push_back(static_cast<Real>(std::log(s)));
  }

  Tensor loss = scale(cross_entropy(preds.logits, targets), static_cast<Real>(weights.classification));
  if (!rows.empty()) {
    const Real inv = Real{1} / static_cast<Real>(rows.size());
    const Tensor center_err =
        abs(sub(index_rows(preds.center, rows), Tensor({rows.size(), 3}, std::move(center_target))));
    const Tensor size_err =
        abs(sub(index_rows(preds.log_size, rows), Tensor({rows.size(), 3}, std::move(size_target))));
    loss = add(loss, scale(sum(center_err), inv * static_cast<Real>(weights.center)));
    loss = add(loss, scale(sum(size_err), inv * static_cast<Real>(weights.size)));
  }
  return loss;
}

namespace {

std::vector<double> softmax_row(std::span<const Real> row) {
  double mx = row[0];
  for (Real v : row) mx = std::max(mx, static_cast<double>(v));
  std::vector<double> p(row.size());
  double z = 0.0;
  for (std::size_t j = 0; j < row.size(); ++j) {
    p[j] = std::exp(static_cast<double>(row[j]) - mx);
    z += p[j];
  }
  for (double& v : p) v /= z;
  return p;
}

}  // namespace

std::vector<CandidatePrediction> to_predictions(const HeadOutput& head) {
  const std::size_t n = head.center.dim(0);
  const std::size_t k = head.logits.dim(1);
  std::vector<CandidatePrediction> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].box.center = {head.center[i * 3], head.center[i * 3 + 1], head.center[i * 3 + 2]};
    for (std::size_t a = 0; a < 3; ++a) out[i].box.size[a] = std::exp(head.log_size[i * 3 + a]);
    out[i].probs = softmax_row(head.logits.data().subspan(i * k, k));
  }
  return out;
}

std::vector<CandidatePrediction> ensemble_predictions(const std::vector<LayerOutput>& outputs) {
  if (outputs.empty()) throw EmptyList("ensemble of zero heads");
  const std::size_t n = outputs.front().boxes.center.dim(0);
  const std::size_t k = outputs.front().boxes.logits.dim(1);
  const double inv = 1.0 / static_cast<double>(outputs.size());
  std::vector<CandidatePrediction> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double c[3] = {0, 0, 0}, ls[3] = {0, 0, 0};
    std::vector<double> probs(k, 0.0);
    for (const LayerOutput& o : outputs) {
      for (std::size_t a = 0; a < 3; ++a) {
        c[a] += o.boxes.center[i * 3 + a] * inv;
        ls[a] += o.boxes.log_size[i * 3 + a] * inv;
      }
      const auto p = softmax_row(o.boxes.logits.data().subspan(i * k, k));
      for (std::size_t j = 0; j < k; ++j) probs[j] += p[j] * inv;
    }
    out[i].box.center = {c[0], c[1], c[2]};
    for (std::size_t a = 0; a < 3; ++a) out[i].box.size[a] = std::exp(ls[a]);
    out[i].probs = std::move(probs);
  }
  return out;
}

}  // namespace demf
