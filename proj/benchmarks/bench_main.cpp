#include <benchmark/benchmark.h>

#include <vector>

#include "demf/attention.hpp"
#include "demf/demf.hpp"
#include "demf/eval.hpp"
#include "demf/model.hpp"
#include "demf/ops.hpp"
#include "demf/params.hpp"
#include "demf/rng.hpp"
#include "demf/scene.hpp"

namespace {

using namespace demf;

Tensor random_tensor(Shape shape, Rng& rng) {
  std::vector<Real> v(numel_of(shape));
  for (Real& x : v) x = static_cast<Real>(rng.uniform(-1.0, 1.0));
  return Tensor(std::move(shape), std::move(v));
}

std::vector<Unit2> random_refs(std::size_t n, Rng& rng) {
  std::vector<Unit2> refs(n);
  for (Unit2& r : refs) r = {rng.uniform(), rng.uniform()};
  return refs;
}

// state.range(0) = N candidates, C = 32, M = 4, K = 2, L = 2 on 32x32 / 16x16.
void BM_MsDeformAttn(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  ParamStore store;
  const DeformAttnParams params =
      DeformAttnParams::create(store, "attn", {32, 4, 2, 2}, OffsetMode::learned, rng, "demf");
  const FeaturePyramid pyramid{{random_tensor({32, 32, 32}, rng), random_tensor({32, 16, 16}, rng)}};
  const Tensor q = random_tensor({n, 32}, rng);
  const auto refs = random_refs(n, rng);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ms_deform_attn(q, refs, pyramid, params));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_MsDeformAttn)->Arg(32)->Arg(256);

void BM_MsDeformAttnBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  ParamStore store;
  const DeformAttnParams params =
      DeformAttnParams::create(store, "attn", {32, 4, 2, 2}, OffsetMode::learned, rng, "demf");
  const FeaturePyramid pyramid{{random_tensor({32, 32, 32}, rng), random_tensor({32, 16, 16}, rng)}};
  Tensor q = random_tensor({n, 32}, rng);
  q.set_requires_grad(true);
  const auto refs = random_refs(n, rng);
  for (auto _ : state) {
    store.zero_grad();
    sum(ms_deform_attn(q, refs, pyramid, params)).backward();
  }
}
BENCHMARK(BM_MsDeformAttnBackward)->Arg(32);

void BM_SelfAttn(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  ParamStore store;
  const SelfAttnParams params = SelfAttnParams::create(store, "self", 32, 4, rng, "demf");
  const Tensor zs = random_tensor({n, 32}, rng);
  const Tensor pos = random_tensor({n, 32}, rng);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(self_attn(zs, pos, params));
}
BENCHMARK(BM_SelfAttn)->Arg(32)->Arg(256);

void BM_TrainStep(benchmark::State& state) {
  ModelConfig cfg;
  cfg.demf.fusion = state.range(0) != 0;
  ToyDetector model(cfg, 4);
  const ToyScene scene = synth_scene(7, SceneSpec{});
  Rng rng(5);
  ForwardContext ctx{true, &rng};
  for (auto _ : state) {
    model.params().zero_grad();
    const ModelOutput out = model.forward(scene, ctx);
    total_loss(model.layer_losses(scene, out, {})).backward();
  }
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_SynthScene(benchmark::State& state) {
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(synth_scene(seed++, SceneSpec{}));
}
BENCHMARK(BM_SynthScene)->Unit(benchmark::kMillisecond);

void BM_ConfusionAssign(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(6);
  std::vector<Detection> preds(n);
  std::vector<GroundTruthBox> gts(n / 4 + 1);
  for (Detection& d : preds) {
    d.box = {{rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(0, 5)}, {1, 1, 1}};
    d.score = rng.uniform();
  }
  for (GroundTruthBox& g : gts) g.box = {{rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(0, 5)}, {1, 1, 1}};
  for (auto _ : state) benchmark::DoNotOptimize(confusion_assign(preds, gts, 0.25));
}
BENCHMARK(BM_ConfusionAssign)->Arg(64)->Arg(1024);

}  // namespace

BENCHMARK_MAIN();
