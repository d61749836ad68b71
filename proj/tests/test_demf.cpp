#include <gtest/gtest.h>

#include <cmath>

#include "demf/demf.hpp"
#include "demf/error.hpp"
#include "demf/gradcheck.hpp"
#include "demf/ops.hpp"
#include "support.hpp"

namespace demf {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;

void fill(Tensor t, Real v) {
  for (Real& x : t.data_mut()) x = v;
}

void zero_branches(DeMFLayerParams& p) {
  for (const Tensor& t : {p.self_attn.wq, p.self_attn.bq, p.self_attn.wk, p.self_attn.wv,
                          p.self_attn.bv, p.self_attn.wo, p.self_attn.bo, p.ffn_w1, p.ffn_b1,
                          p.ffn_w2, p.ffn_b2, p.pos_weight, p.pos_bias})
    fill(t, 0);
  if (p.cross_attn) {
    fill(p.cross_attn->value_proj, 0);
    fill(p.cross_attn->output_proj, 0);
  }
}

struct Fixture {
  DeMFConfig cfg;
  ParamStore store;
  DeMFStack stack;
  PointFeatureSet pf;
  CameraModel cam = CameraModel::pinhole(20, 12, 12, 24, 24);
  FeaturePyramid pyramid;

  explicit Fixture(DeMFConfig c, std::size_t n = 4, std::uint64_t seed = 1) : cfg(c) {
    cfg.dropout = 0;
    Rng rng(seed);
    stack = DeMFStack::create(store, cfg, rng);
    pf.feats = random_tensor({n, cfg.channels}, rng);
    for (std::size_t i = 0; i < n; ++i) {
      pf.coords.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 4)});
    }
    std::size_t side = 12;
    for (std::size_t l = 0; l < cfg.levels; ++l, side = (side + 1) / 2) {
      pyramid.levels.push_back(random_tensor({cfg.channels, side, side}, rng));
    }
  }

  std::vector<LayerOutput> forward() {
    ForwardContext ctx;
    return demf_forward(pf, cam, cfg.fusion ? &pyramid : nullptr, stack, ctx);
  }
};

DeMFConfig small_config() {
  DeMFConfig c;
  c.channels = 8;
  c.heads = 2;
  c.samples = 2;
  c.levels = 2;
  c.layers = 2;
  c.num_classes = 3;
  return c;
}

TEST(DemfLayer, ZeroBranchesOnlyNormalize) {
  Fixture f(small_config());
  DeMFLayerParams& layer = f.stack.layers[0];
  zero_branches(layer);
  const auto refs = reference_points(f.cam, f.pf.coords);
  ForwardContext ctx;
  const Tensor pos = Tensor::zeros({4, 8});
  const Tensor out = demf_layer(f.pf.feats, refs.points, refs.valid, &f.pyramid, pos, layer,
                                f.cfg, ctx);
  const Tensor g = Tensor::full({8}, 1), b = Tensor::zeros({8});
  const Tensor want = layer_norm(layer_norm(layer_norm(f.pf.feats, g, b), g, b), g, b);
  EXPECT_LT(max_abs_diff(out.data(), want.data()), 1e-15);
  // Normalization is the only change: LN(x) itself is within eps of it.
  EXPECT_LT(max_abs_diff(out.data(), layer_norm(f.pf.feats, g, b).data()), 1e-4);
}

TEST(DemfLayer, ConstantPyramidMakesOffsetsIrrelevant) {
  DeMFConfig cfg = small_config();
  Fixture f(cfg, 1);
  for (Tensor& level : f.pyramid.levels) {
    for (std::size_t c = 0; c < cfg.channels; ++c) {
      const std::size_t hw = level.dim(1) * level.dim(2);
      auto d = level.data_mut();
      std::fill(d.begin() + c * hw, d.begin() + (c + 1) * hw, Real(0.1 * (c + 1)));
    }
  }
  f.pf.coords[0] = {0, 0, 3};  // reference at the image center
  DeMFLayerParams& layer = f.stack.layers[0];
  const auto refs = reference_points(f.cam, f.pf.coords);
  ForwardContext ctx;
  const Tensor pos = Tensor::zeros({1, 8});
  const Tensor a = demf_layer(f.pf.feats, refs.points, refs.valid, &f.pyramid, pos, layer, f.cfg, ctx);
  Rng rng(4);
  for (Real& w : layer.cross_attn->offset_weight.data_mut()) w = Real(rng.uniform(-0.1, 0.1));
  const Tensor b = demf_layer(f.pf.feats, refs.points, refs.valid, &f.pyramid, pos, layer, f.cfg, ctx);
  EXPECT_LT(max_abs_diff(a.data(), b.data()), 1e-14);
}

TEST(DemfLayer, DegenerateCandidateGetsNoCrossAttention) {
  DeMFConfig cfg = small_config();
  Fixture f(cfg, 3);
  DeMFLayerParams& layer = f.stack.layers[0];
  const auto refs = reference_points(f.cam, f.pf.coords);
  std::vector<std::uint8_t> valid = refs.valid;
  valid[1] = 0;
  ForwardContext ctx;
  const Tensor pos = Tensor::zeros({3, 8});
  const Tensor with = demf_layer(f.pf.feats, refs.points, valid, &f.pyramid, pos, layer, f.cfg, ctx);
  // Zero the pyramid: only row 1 must be unaffected.
  FeaturePyramid blank;
  for (const Tensor& l : f.pyramid.levels) blank.levels.push_back(Tensor::zeros(l.shape()));
  fill(layer.self_attn.wo, 0);
  fill(layer.self_attn.bo, 0);
  const Tensor a = demf_layer(f.pf.feats, refs.points, valid, &f.pyramid, pos, layer, f.cfg, ctx);
  const Tensor b = demf_layer(f.pf.feats, refs.points, valid, &blank, pos, layer, f.cfg, ctx);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(a[8 + c], b[8 + c]);
  EXPECT_GT(max_abs_diff(a.data().subspan(0, 8), b.data().subspan(0, 8)), 1e-6);
  EXPECT_EQ(with.shape(), (Shape{3, 8}));
}

TEST(ReferencePoints, DegenerateProjectionFlagged) {
  const CameraModel cam = CameraModel::pinhole(10, 5, 5, 10, 10);
  const auto refs = reference_points(cam, {{0, 0, 2}, {1, 1, 0}});
  EXPECT_EQ(refs.valid, (std::vector<std::uint8_t>{1, 0}));
  EXPECT_EQ(refs.points[1].a, 0.0);
  EXPECT_EQ(refs.points[1].b, 0.0);
}

TEST(DemfForward, EmptyStackIsBaseHead) {
  DeMFConfig cfg = small_config();
  cfg.layers = 0;
  Fixture f(cfg);
  const auto out = f.forward();
  ASSERT_EQ(out.size(), 1u);
  const HeadOutput base = f.stack.heads[0].apply(f.pf.feats, f.pf.coords);
  EXPECT_EQ(max_abs_diff(out[0].boxes.logits.data(), base.logits.data()), 0.0);
  EXPECT_EQ(max_abs_diff(out[0].boxes.center.data(), base.center.data()), 0.0);
  EXPECT_EQ(max_abs_diff(out[0].boxes.log_size.data(), base.log_size.data()), 0.0);
}

TEST(DemfForward, IdenticalZeroLayersGiveEqualLosses) {
  DeMFConfig cfg = small_config();
  cfg.layers = 3;
  Fixture f(cfg);
  for (DeMFLayerParams& l : f.stack.layers) zero_branches(l);
  for (std::size_t h = 2; h < f.stack.heads.size(); ++h) {
    for (auto [dst, src] : {std::pair{f.stack.heads[h].w1, f.stack.heads[1].w1},
                            {f.stack.heads[h].b1, f.stack.heads[1].b1},
                            {f.stack.heads[h].w2, f.stack.heads[1].w2},
                            {f.stack.heads[h].b2, f.stack.heads[1].b2}}) {
      std::copy(src.data().begin(), src.data().end(), dst.data_mut().begin());
    }
  }
  const auto out = f.forward();
  const std::vector<GroundTruthBox> gts{{{f.pf.coords[0], {0.5, 0.5, 0.5}}, 1}};
  const double first = detection_loss(out[1].boxes, f.pf.coords, gts, 3).item();
  for (std::size_t l = 2; l < out.size(); ++l) {
    EXPECT_NEAR(detection_loss(out[l].boxes, f.pf.coords, gts, 3).item(), first, 1e-4);
  }
}

TEST(DemfForward, FiniteBoxesAndEveryParameterGetsGradient) {
  Fixture f(small_config());
  const auto out = f.forward();
  Rng rng(77);
  std::vector<Tensor> terms;
  for (const LayerOutput& o : out) {
    for (Real v : o.boxes.center.data()) EXPECT_TRUE(std::isfinite(v));
    for (Real v : o.boxes.log_size.data()) EXPECT_GT(std::exp(v), 0.0);
    const Tensor r = random_tensor(o.boxes.box_vector().shape(), rng);
    const Tensor s = random_tensor(o.boxes.logits.shape(), rng);
    terms.push_back(add(sum(mul(o.boxes.box_vector(), r)), sum(mul(o.boxes.logits, s))));
  }
  total_loss(terms).backward();
  for (const Parameter& p : f.store.params()) {
    ASSERT_TRUE(p.tensor.has_grad()) << p.name;
    bool nonzero = false;
    for (Real g : p.tensor.grad()) nonzero |= g != 0;
    EXPECT_TRUE(nonzero) << p.name;
  }
}

TEST(DemfForward, SpatialEncodingIsDetached) {
  Fixture f(small_config());
  const auto out = f.forward();
  Rng rng(3);
  sum(mul(out[1].boxes.box_vector(), random_tensor({4, 6}, rng))).backward();
  for (const Tensor& t : {f.stack.heads[0].w1, f.stack.heads[0].w2}) {
    for (Real g : t.has_grad() ? t.grad() : std::span<const Real>{}) EXPECT_EQ(g, 0.0);
  }
  EXPECT_TRUE(f.stack.layers[0].pos_weight.has_grad());
}

TEST(DemfForward, CandidatePermutationEquivariance) {
  Fixture f(small_config(), 5);
  const auto out = f.forward();
  const std::vector<std::size_t> perm{4, 2, 0, 3, 1};
  PointFeatureSet permuted;
  permuted.feats = index_rows(f.pf.feats, perm);
  for (std::size_t i : perm) permuted.coords.push_back(f.pf.coords[i]);
  ForwardContext ctx;
  const auto pout = demf_forward(permuted, f.cam, &f.pyramid, f.stack, ctx);
  for (std::size_t l = 0; l < out.size(); ++l) {
    const Tensor& a = out[l].boxes.logits;
    const Tensor& b = pout[l].boxes.logits;
    const std::size_t k = a.dim(1);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < k; ++j) EXPECT_NEAR(b[i * k + j], a[perm[i] * k + j], 1e-12);
  }
}

TEST(DemfForward, EndToEndGradientMatchesFiniteDifferences) {
  DeMFConfig cfg = small_config();
  Fixture f(cfg, 4, 1);
  const std::vector<GroundTruthBox> gts{{{f.pf.coords[0], {0.5, 0.6, 0.7}}, 1},
                                        {{f.pf.coords[2], {0.4, 0.4, 0.9}}, 2}};
  LossWeights w;
  w.assign_radius = 0.3;
  // The box vectors feeding each positional embedding are cut from the graph,
  // so the finite-difference side must hold them fixed as well.
  const auto reference = f.forward();
  std::vector<Tensor> spatial;
  for (std::size_t l = 0; l + 1 < reference.size(); ++l)
    spatial.push_back(reference[l].boxes.box_vector().detach());
  const auto refs = reference_points(f.cam, f.pf.coords);
  auto loss = [&] {
    ForwardContext ctx;
    std::vector<Tensor> per;
    Tensor feats = f.pf.feats;
    per.push_back(detection_loss(f.stack.heads[0].apply(feats, f.pf.coords), f.pf.coords, gts, 3, w));
    for (std::size_t l = 0; l < f.stack.layers.size(); ++l) {
      const DeMFLayerParams& layer = f.stack.layers[l];
      const Tensor pos = linear(spatial[l], layer.pos_weight, layer.pos_bias);
      feats = demf_layer(feats, refs.points, refs.valid, &f.pyramid, pos, layer, f.cfg, ctx);
      per.push_back(
          detection_loss(f.stack.heads[l + 1].apply(feats, f.pf.coords), f.pf.coords, gts, 3, w));
    }
    return total_loss(per);
  };
  std::vector<Tensor> per;
  for (const LayerOutput& o : reference) per.push_back(detection_loss(o.boxes, f.pf.coords, gts, 3, w));
  ASSERT_EQ(loss().item(), total_loss(per).item());

  std::vector<Tensor> inputs{f.pf.feats};
  for (const Parameter& p : f.store.params()) inputs.push_back(p.tensor);
  const GradReport r = grad_check(loss, inputs, 1e-5, 1e-5);
  EXPECT_TRUE(r.passed) << r.message;
}

TEST(TotalLoss, MeanOfLayers) {
  EXPECT_EQ(total_loss({Tensor::scalar(2.0)}).item(), 2.0);
  EXPECT_EQ(total_loss({Tensor::scalar(1.0), Tensor::scalar(2.0), Tensor::scalar(3.0)}).item(), 2.0);
  const double c = 0.1;
  EXPECT_EQ(total_loss({Tensor::scalar(c), Tensor::scalar(c), Tensor::scalar(c)}).item(), c);
  EXPECT_THROW(total_loss(std::vector<Tensor>{}), EmptyList);
  EXPECT_THROW(total_loss({Tensor::zeros({2})}), NonScalarLoss);
  const std::vector<double> plain{1.0, 2.0, 3.0};
  EXPECT_EQ(total_loss(std::span<const double>(plain)), 2.0);
}

TEST(TotalLoss, GradientIsOneOverCount) {
  Tensor a = Tensor::scalar(1.0, true), b = Tensor::scalar(5.0, true);
  total_loss({a, b, mul(a, b)}).backward();
  EXPECT_DOUBLE_EQ(a.grad()[0], (1.0 + 5.0) / 3.0);
  EXPECT_DOUBLE_EQ(b.grad()[0], (1.0 + 1.0) / 3.0);
}

TEST(AssignCandidates, NearestWithinRadiusTiesToLowerIndex) {
  const std::vector<GroundTruthBox> gts{{{{0, 0, 0}, {1, 1, 1}}, 0}, {{{1, 0, 0}, {1, 1, 1}}, 1}};
  const auto a = assign_candidates({{0.1, 0, 0}, {0.5, 0, 0}, {0.9, 0, 0}, {5, 5, 5}}, gts, 0.6);
  EXPECT_EQ(a[0], 0u);
  EXPECT_EQ(a[1], 0u);
  EXPECT_EQ(a[2], 1u);
  EXPECT_EQ(a[3], kUnassigned);
}

HeadOutput make_head(const std::vector<double>& centers, const std::vector<double>& log_sizes,
                     const std::vector<double>& logits, std::size_t n) {
  auto t = [](const std::vector<double>& v, Shape s) {
    return Tensor(std::move(s), std::vector<Real>(v.begin(), v.end()));
  };
  return {t(centers, {n, 3}), t(log_sizes, {n, 3}), t(logits, {n, logits.size() / n})};
}

TEST(DetectionLoss, PerfectPredictionWithMarginTen) {
  const GroundTruthBox gt{{{1, 2, 3}, {0.5, 1, 2}}, 1};
  const HeadOutput h = make_head({1, 2, 3}, {std::log(0.5), 0, std::log(2.0)}, {0, 10, 0}, 1);
  EXPECT_LT(detection_loss(h, {{1, 2, 3}}, {gt}, 2).item(), 1e-4);
}

TEST(DetectionLoss, NoGroundTruthIsBackgroundCrossEntropy) {
  Rng rng(6);
  const Tensor logits = random_tensor({4, 3}, rng);
  const HeadOutput h{random_tensor({4, 3}, rng), random_tensor({4, 3}, rng), logits};
  const std::vector<Point3> coords(4, Point3{0, 0, 1});
  const std::vector<std::size_t> bg(4, 2);
  EXPECT_DOUBLE_EQ(detection_loss(h, coords, {}, 2).item(), cross_entropy(logits, bg).item());
}

// Independent restatement of the loss: nearest-center assignment, mean CE
// over every candidate, L1 terms averaged over assigned candidates.
double naive_detection_loss(const HeadOutput& h, const std::vector<Point3>& coords,
                            const std::vector<GroundTruthBox>& gts, std::size_t classes,
                            const LossWeights& w) {
  const std::size_t n = coords.size(), k = classes + 1;
  double ce = 0, center = 0, size = 0;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t target = classes, gi = gts.size();
    double best = w.assign_radius * w.assign_radius;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const Point3& c = gts[g].box.center;
      const double d = std::pow(coords[i].x - c.x, 2) + std::pow(coords[i].y - c.y, 2) +
                       std::pow(coords[i].z - c.z, 2);
      if (d < best) best = d, gi = g;
    }
    if (gi < gts.size()) target = gts[gi].class_id;
    double mx = -1e300, z = 0;
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, double(h.logits[i * k + j]));
    for (std::size_t j = 0; j < k; ++j) z += std::exp(h.logits[i * k + j] - mx);
    ce += -(h.logits[i * k + target] - mx - std::log(z));
    if (gi == gts.size()) continue;
    ++assigned;
    const Box3& b = gts[gi].box;
    const double cc[3] = {b.center.x, b.center.y, b.center.z};
    for (int a = 0; a < 3; ++a) {
      center += std::abs(h.center[i * 3 + a] - cc[a]);
      size += std::abs(h.log_size[i * 3 + a] - std::log(b.size[a]));
    }
  }
  double loss = w.classification * ce / double(n);
  if (assigned) loss += (w.center * center + w.size * size) / double(assigned);
  return loss;
}

TEST(DetectionLoss, MatchesNaiveRestatement) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(6), classes = 2 + rng.below(3);
    std::vector<Point3> coords;
    for (std::size_t i = 0; i < n; ++i) coords.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), 0});
    std::vector<GroundTruthBox> gts;
    for (std::size_t g = 0, m = rng.below(4); g < m; ++g) {
      gts.push_back({{{rng.uniform(-1, 1), rng.uniform(-1, 1), 0},
                      {rng.uniform(0.2, 1), rng.uniform(0.2, 1), rng.uniform(0.2, 1)}},
                     static_cast<std::size_t>(rng.below(classes))});
    }
    const HeadOutput h{random_tensor({n, 3}, rng), random_tensor({n, 3}, rng),
                       random_tensor({n, classes + 1}, rng, -3, 3)};
    LossWeights w{rng.uniform(0.5, 2), rng.uniform(0.5, 2), rng.uniform(0.5, 2), 0.7};
    EXPECT_NEAR(detection_loss(h, coords, gts, classes, w).item(),
                naive_detection_loss(h, coords, gts, classes, w), 1e-12);
  }
}

TEST(Ensemble, AveragesHeads) {
  const HeadOutput a = make_head({0, 0, 0}, {0, 0, 0}, {0, 0}, 1);
  const HeadOutput b = make_head({2, 4, 6}, {std::log(4.0), 0, 0}, {std::log(3.0), 0}, 1);
  const auto e = ensemble_predictions({{Tensor(), a}, {Tensor(), b}});
  ASSERT_EQ(e.size(), 1u);
  EXPECT_DOUBLE_EQ(e[0].box.center.y, 2.0);
  EXPECT_DOUBLE_EQ(e[0].box.size[0], 2.0);  // geometric mean of 1 and 4
  EXPECT_DOUBLE_EQ(e[0].probs[0], (0.5 + 0.75) / 2);
}

}  // namespace
}  // namespace demf
