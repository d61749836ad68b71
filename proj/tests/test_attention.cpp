#include <gtest/gtest.h>

#include <cmath>

#include "demf/attention.hpp"
#include "demf/error.hpp"
#include "demf/grad_suite.hpp"
#include "demf/ops.hpp"
#include "demf/params.hpp"
#include "support.hpp"

namespace demf {
namespace {

using testing::max_abs_diff;
using testing::naive_bilinear;
using testing::naive_deform_attn;
using testing::naive_self_attn;
using testing::random_tensor;

void fill(Tensor t, Rng& rng, double lo, double hi) {
  for (Real& v : t.data_mut()) v = static_cast<Real>(rng.uniform(lo, hi));
}

void set_identity(Tensor t) {
  auto d = t.data_mut();
  std::fill(d.begin(), d.end(), Real{0});
  const std::size_t n = t.dim(t.rank() - 1);
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1;
}

DeformAttnParams random_params(ParamStore& store, const DeformAttnDims& dims, OffsetMode mode,
                               Rng& rng) {
  DeformAttnParams p = DeformAttnParams::create(store, "attn", dims, mode, rng, "g");
  fill(p.value_proj, rng, -0.5, 0.5);
  fill(p.output_proj, rng, -0.5, 0.5);
  fill(p.attn_weight, rng, -1, 1);
  fill(p.attn_bias, rng, -1, 1);
  if (mode == OffsetMode::learned) {
    fill(p.offset_weight, rng, -0.5, 0.5);
    fill(p.offset_bias, rng, -2, 2);
  }
  return p;
}

Unit2 random_unit(Rng& rng) { return {rng.uniform(), rng.uniform()}; }

TEST(BilinearSample, LatticePointAndCellCenter) {
  const Tensor map({1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(bilinear_sample(map, Unit2{0.25, 0.25})[0], 1.0);
  EXPECT_EQ(bilinear_sample(map, Unit2{0.5, 0.5})[0], 2.5);
  const Tensor far = bilinear_sample(map, Unit2{-1, -1});
  EXPECT_EQ(far[0], 0.0);
}

TEST(BilinearSample, MatchesTentSumOracle) {
  Rng rng(31);
  for (int i = 0; i < 200; ++i) {
    const Tensor map = random_tensor({3, 5, 7}, rng);
    const double u = rng.uniform(-0.3, 1.3), v = rng.uniform(-0.3, 1.3);
    const Tensor got = bilinear_sample(map, Unit2{u, v});
    const auto want = naive_bilinear(map, u, v);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(got[c], want[c], 1e-14);
  }
}

TEST(DeformAttn, ReducesToBilinearLookup) {
  Rng rng(2);
  ParamStore store;
  const DeformAttnDims dims{4, 1, 1, 1};
  DeformAttnParams p = DeformAttnParams::create(store, "a", dims, OffsetMode::learned, rng, "g");
  set_identity(p.value_proj);
  set_identity(p.output_proj);
  fill(p.offset_bias, rng, 0, 0);
  fill(p.attn_weight, rng, -3, 3);  // a single logit softmaxes to 1 regardless
  for (int i = 0; i < 50; ++i) {
    const Tensor x = random_tensor({4, 6, 5}, rng);
    const Tensor q = random_tensor({4}, rng);
    const Unit2 ref = random_unit(rng);
    const Tensor got = deform_attn(q, ref, x, p);
    const Tensor want = bilinear_sample(x, ref);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(got[c], want[c]);
  }
}

TEST(DeformAttn, UniformGridSamplesAverage) {
  Rng rng(4);
  ParamStore store;
  const DeformAttnDims dims{3, 1, 1, 4};
  DeformAttnParams p = DeformAttnParams::create(store, "a", dims, OffsetMode::learned, rng, "g");
  fill(p.value_proj, rng, -1, 1);
  fill(p.output_proj, rng, -1, 1);
  const std::vector<Real> grid = grid_offsets(dims);
  std::copy(grid.begin(), grid.end(), p.offset_bias.data_mut().begin());
  const Tensor x = random_tensor({3, 6, 6}, rng);
  const Tensor q = random_tensor({3}, rng);
  const Unit2 ref{0.45, 0.6};
  const Tensor got = deform_attn(q, ref, x, p);

  std::vector<double> mean(3, 0.0);
  for (std::size_t k = 0; k < 4; ++k) {
    const Tensor s = bilinear_sample(x, Unit2{ref.a + grid[2 * k] / 6, ref.b + grid[2 * k + 1] / 6});
    for (std::size_t c = 0; c < 3; ++c) mean[c] += s[c] / 4;
  }
  const Tensor projected =
      matmul(matmul(Tensor({1, 3}, {Real(mean[0]), Real(mean[1]), Real(mean[2])}),
                    reshape(p.value_proj, {3, 3})),
             p.output_proj);
  EXPECT_LT(max_abs_diff(got.data(), projected.data()), 1e-14);
}

TEST(DeformAttn, MatchesNaiveOracle) {
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    ParamStore store;
    const DeformAttnParams p = random_params(store, {8, 2, 1, 2}, OffsetMode::learned, rng);
    const Tensor x = random_tensor({8, 5, 5}, rng);
    const Tensor q = random_tensor({8}, rng);
    const Unit2 ref = random_unit(rng);
    const Tensor got = deform_attn(q, ref, x, p);
    const auto want = naive_deform_attn(q.data(), ref, {x}, p, false);
    for (std::size_t c = 0; c < 8; ++c) ASSERT_NEAR(got[c], want[c], 1e-12) << "instance " << i;
  }
}

TEST(DeformAttn, RequiresSingleLevelParams) {
  Rng rng(1);
  ParamStore store;
  const DeformAttnParams p = random_params(store, {4, 1, 2, 1}, OffsetMode::learned, rng);
  EXPECT_THROW(deform_attn(random_tensor({4}, rng), {0.5, 0.5}, random_tensor({4, 3, 3}, rng), p),
               LevelMismatch);
}

TEST(MsDeformAttn, MatchesNaiveOracle) {
  Rng rng(6);
  for (int i = 0; i < 100; ++i) {
    ParamStore store;
    const DeformAttnParams p = random_params(store, {8, 2, 2, 2}, OffsetMode::learned, rng);
    const FeaturePyramid pyr{{random_tensor({8, 6, 6}, rng), random_tensor({8, 3, 3}, rng)}};
    const Tensor q = random_tensor({8}, rng);
    const Unit2 ref = random_unit(rng);
    const Tensor got = ms_deform_attn(q, ref, pyr, p);
    const auto want = naive_deform_attn(q.data(), ref, pyr.levels, p, false);
    for (std::size_t c = 0; c < 8; ++c) ASSERT_NEAR(got[c], want[c], 1e-12) << "instance " << i;
  }
}

TEST(MsDeformAttn, SingleLevelEqualsDeformAttn) {
  Rng rng(7);
  ParamStore store;
  const DeformAttnParams p = random_params(store, {8, 2, 1, 2}, OffsetMode::learned, rng);
  const Tensor x = random_tensor({8, 5, 4}, rng);
  const Tensor q = random_tensor({8}, rng);
  const Tensor a = deform_attn(q, {0.3, 0.7}, x, p);
  const Tensor b = ms_deform_attn(q, Unit2{0.3, 0.7}, FeaturePyramid{{x}}, p);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(a[c], b[c]);
}

TEST(MsDeformAttn, BatchedRowsEqualSingleQueries) {
  Rng rng(8);
  ParamStore store;
  const DeformAttnParams p = random_params(store, {8, 2, 2, 2}, OffsetMode::learned, rng);
  const FeaturePyramid pyr{{random_tensor({8, 6, 6}, rng), random_tensor({8, 3, 3}, rng)}};
  const Tensor qs = random_tensor({5, 8}, rng);
  std::vector<Unit2> refs;
  for (int i = 0; i < 5; ++i) refs.push_back(random_unit(rng));
  const Tensor batched = ms_deform_attn(qs, refs, pyr, p);
  for (std::size_t i = 0; i < 5; ++i) {
    const Tensor one = ms_deform_attn(reshape(narrow(qs, 0, i, 1), {8}), refs[i], pyr, p);
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(batched[i * 8 + c], one[c]);
  }
}

TEST(MsDeformAttn, ConstantPyramidIgnoresOffsets) {
  Rng rng(9);
  ParamStore store;
  const DeformAttnParams p = random_params(store, {4, 2, 2, 2}, OffsetMode::learned, rng);
  const std::vector<Real> value{0.5, -1.0, 2.0, 0.25};
  auto constant = [&](std::size_t h, std::size_t w) {
    std::vector<Real> d;
    for (Real v : value) d.insert(d.end(), h * w, v);
    return Tensor({4, h, w}, d);
  };
  const FeaturePyramid pyr{{constant(8, 8), constant(4, 4)}};
  // Every sample reads the same vector, so the head outputs are its projections.
  std::vector<Real> heads(4, 0);
  for (std::size_t m = 0; m < 2; ++m)
    for (std::size_t d = 0; d < 2; ++d)
      for (std::size_t c = 0; c < 4; ++c) heads[m * 2 + d] += value[c] * p.value_proj[(m * 4 + c) * 2 + d];
  const Tensor expected = matmul(Tensor({1, 4}, heads), p.output_proj);
  for (int i = 0; i < 20; ++i) {
    // Keep every sample strictly inside so zero padding never kicks in.
    fill(p.offset_weight, rng, -0.05, 0.05);
    fill(p.offset_bias, rng, -0.5, 0.5);
    const Tensor got = ms_deform_attn(random_tensor({4}, rng), Unit2{0.5, 0.5}, pyr, p);
    EXPECT_LT(max_abs_diff(got.data(), expected.data()), 1e-14);
  }
}

TEST(MsDeformAttn, LevelCountMustMatch) {
  Rng rng(10);
  ParamStore store;
  const DeformAttnParams p = random_params(store, {4, 1, 2, 1}, OffsetMode::learned, rng);
  const FeaturePyramid one{{random_tensor({4, 4, 4}, rng)}};
  EXPECT_THROW(ms_deform_attn(random_tensor({4}, rng), Unit2{0.5, 0.5}, one, p), LevelMismatch);
  const FeaturePyramid wrong_c{{random_tensor({4, 4, 4}, rng), random_tensor({3, 2, 2}, rng)}};
  EXPECT_THROW(ms_deform_attn(random_tensor({4}, rng), Unit2{0.5, 0.5}, wrong_c, p),
               ShapeMismatch);
}

TEST(MsDeformAttn, WeightsSumToOnePerHead) {
  Rng rng(11);
  for (OffsetMode mode : {OffsetMode::learned, OffsetMode::grid}) {
    ParamStore store;
    const DeformAttnParams p = random_params(store, {8, 4, 3, 4}, mode, rng);
    fill(p.attn_weight, rng, -5, 5);
    const Tensor w = attention_weights(random_tensor({6, 8}, rng), p);
    ASSERT_EQ(w.shape(), (Shape{6, 4, 12}));
    for (std::size_t row = 0; row < 6 * 4; ++row) {
      double total = 0;
      for (std::size_t j = 0; j < 12; ++j) total += w[row * 12 + j];
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(MsDeformAttn, FarOutsideReferenceStaysFinite) {
  Rng rng(12);
  ParamStore store;
  DeformAttnParams p = random_params(store, {8, 2, 2, 2}, OffsetMode::learned, rng);
  fill(p.offset_bias, rng, 40, 60);
  const FeaturePyramid pyr{{random_tensor({8, 6, 6}, rng), random_tensor({8, 3, 3}, rng)}};
  Tensor q = random_tensor({8}, rng);
  q.set_requires_grad(true);
  const Tensor out = ms_deform_attn(q, Unit2{1.0, 1.0}, pyr, p);
  for (Real v : out.data()) EXPECT_EQ(v, 0.0);  // every sample lands in the zero padding
  sum(out).backward();
  for (const Tensor& t : {q, p.offset_weight, p.value_proj, pyr.levels[0]}) {
    if (!t.has_grad()) continue;
    for (Real g : t.grad()) EXPECT_TRUE(std::isfinite(g));
  }
}

TEST(GridDeformAttn, SingleSampleHitsReference) {
  Rng rng(13);
  ParamStore store;
  DeformAttnParams p = random_params(store, {4, 1, 1, 1}, OffsetMode::grid, rng);
  set_identity(p.value_proj);
  set_identity(p.output_proj);
  const Tensor x = random_tensor({4, 5, 5}, rng);
  const Tensor got = grid_deform_attn(random_tensor({4}, rng), {0.37, 0.81}, FeaturePyramid{{x}}, p);
  const Tensor want = bilinear_sample(x, Unit2{0.37, 0.81});
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(got[c], want[c]);
}

TEST(GridDeformAttn, RotationSymmetricMapGivesRotationInvariantOutput) {
  // 4x4 map symmetric under 90 degree rotation, 2x2 grid at the center:
  // rotating the map permutes the four samples, and uniform weights make
  // the sum invariant.
  Rng rng(14);
  ParamStore store;
  DeformAttnParams p = random_params(store, {2, 1, 1, 4}, OffsetMode::grid, rng);
  fill(p.attn_weight, rng, 0, 0);
  fill(p.attn_bias, rng, 0, 0);
  set_identity(p.value_proj);
  set_identity(p.output_proj);
  const Tensor base = random_tensor({2, 4, 4}, rng);
  auto rotate = [](const Tensor& m) {
    std::vector<Real> r(m.numel());
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) r[(c * 4 + x) * 4 + (3 - y)] = m[(c * 4 + y) * 4 + x];
    return Tensor({2, 4, 4}, r);
  };
  const Tensor rotated = rotate(base);
  const Tensor q = random_tensor({2}, rng);
  const Tensor a = grid_deform_attn(q, {0.5, 0.5}, FeaturePyramid{{base}}, p);
  const Tensor b = grid_deform_attn(q, {0.5, 0.5}, FeaturePyramid{{rotated}}, p);
  for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(a[c], b[c], 1e-15);
}

TEST(GridDeformAttn, MatchesNaiveOracle) {
  Rng rng(15);
  for (int i = 0; i < 100; ++i) {
    ParamStore store;
    const DeformAttnParams p = random_params(store, {8, 2, 2, 4}, OffsetMode::grid, rng);
    const FeaturePyramid pyr{{random_tensor({8, 6, 6}, rng), random_tensor({8, 3, 3}, rng)}};
    const Tensor q = random_tensor({8}, rng);
    const Unit2 ref = random_unit(rng);
    const Tensor got = grid_deform_attn(q, ref, pyr, p);
    const auto want = naive_deform_attn(q.data(), ref, pyr.levels, p, true);
    for (std::size_t c = 0; c < 8; ++c) ASSERT_NEAR(got[c], want[c], 1e-12);
  }
}

TEST(GridDeformAttn, NonSquareSampleCountRejected) {
  EXPECT_THROW(grid_offsets({8, 2, 1, 3}), NonSquareK);
  Rng rng(1);
  ParamStore store;
  EXPECT_THROW(DeformAttnParams::create(store, "a", {8, 2, 1, 2}, OffsetMode::grid, rng, "g"),
               NonSquareK);
}

TEST(DeformAttnInit, RingOffsetsAndUniformWeights) {
  Rng rng(16);
  ParamStore store;
  const DeformAttnDims dims{8, 2, 2, 3};
  const DeformAttnParams p = DeformAttnParams::create(store, "a", dims, OffsetMode::learned, rng, "g");
  for (Real w : p.offset_weight.data()) EXPECT_EQ(w, 0);
  for (Real w : p.attn_weight.data()) EXPECT_EQ(w, 0);
  for (std::size_t m = 0; m < 2; ++m)
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t k = 0; k < 3; ++k) {
        const std::size_t i = ((m * 2 + l) * 3 + k) * 2;
        const double angle = 2 * M_PI * double(m * 3 + k) / 6.0;
        EXPECT_NEAR(p.offset_bias[i], (k + 1) * std::cos(angle), 1e-15);
        EXPECT_NEAR(p.offset_bias[i + 1], (k + 1) * std::sin(angle), 1e-15);
      }
}

SelfAttnParams random_self_attn(ParamStore& store, std::size_t c, std::size_t m, Rng& rng) {
  SelfAttnParams p = SelfAttnParams::create(store, "sa", c, m, rng, "g");
  for (const Tensor& t : {p.wq, p.bq, p.wk, p.wv, p.bv, p.wo, p.bo}) fill(t, rng, -0.6, 0.6);
  return p;
}

TEST(SelfAttn, MatchesNaiveOracle) {
  Rng rng(17);
  for (int i = 0; i < 100; ++i) {
    ParamStore store;
    const SelfAttnParams p = random_self_attn(store, 8, 2, rng);
    const Tensor z = random_tensor({4, 8}, rng), pos = random_tensor({4, 8}, rng);
    const Tensor got = self_attn(z, pos, p);
    const auto want = naive_self_attn(z, pos, p);
    for (std::size_t j = 0; j < 32; ++j) ASSERT_NEAR(got[j], want[j], 1e-12);
  }
}

TEST(SelfAttn, SingleCandidateIsValueChain) {
  Rng rng(18);
  ParamStore store;
  const SelfAttnParams p = random_self_attn(store, 8, 2, rng);
  const Tensor z = random_tensor({1, 8}, rng), pos = random_tensor({1, 8}, rng);
  const Tensor want = linear(linear(z, p.wv, p.bv), p.wo, p.bo);
  EXPECT_LT(max_abs_diff(self_attn(z, pos, p).data(), want.data()), 1e-15);
}

TEST(SelfAttn, IdenticalCandidatesGetIdenticalOutputs) {
  Rng rng(19);
  ParamStore store;
  const SelfAttnParams p = random_self_attn(store, 8, 4, rng);
  const Tensor row = random_tensor({1, 8}, rng);
  const Tensor out = self_attn(concat({row, row}, 0), Tensor::zeros({2, 8}), p);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(out[c], out[8 + c]);
}

TEST(SelfAttn, PermutationEquivariant) {
  Rng rng(20);
  ParamStore store;
  const SelfAttnParams p = random_self_attn(store, 8, 2, rng);
  const Tensor z = random_tensor({5, 8}, rng), pos = random_tensor({5, 8}, rng);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  const Tensor out = self_attn(z, pos, p);
  const Tensor permuted = self_attn(index_rows(z, perm), index_rows(pos, perm), p);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 8; ++c)
      EXPECT_NEAR(permuted[i * 8 + c], out[perm[i] * 8 + c], 1e-14);
}

class AttentionGrad : public ::testing::TestWithParam<std::string> {};

TEST_P(AttentionGrad, TwentySeedsAtStrictTolerance) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const GradCase c = run_grad_case(GetParam(), seed, 1e-5, 1e-6);
    EXPECT_LE(c.report.coordinates, 2000u);
    EXPECT_TRUE(c.report.passed) << "seed " << seed << ": " << c.report.message;
  }
}

INSTANTIATE_TEST_SUITE_P(Ops, AttentionGrad,
                         ::testing::Values("bilinear_sample", "deform_attn", "ms_deform_attn",
                                           "self_attn"));

}  // namespace
}  // namespace demf
