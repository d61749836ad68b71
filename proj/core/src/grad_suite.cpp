#include "demf/grad_suite.hpp"

#include <cmath>
#include <functional>
#include <span>

#include "demf/attention.hpp"
#include "demf/demf.hpp"
#include "demf/error.hpp"
#include "demf/ops.hpp"
#include "demf/params.hpp"
#include "demf/rng.hpp"

namespace demf {

namespace {

constexpr std::uint64_t kSuiteStream = 0x47524144ULL;  // "GRAD"
constexpr double kKinkMargin = 0.05;  // cells
constexpr int kMaxRedraws = 200;

Tensor random_tensor(Shape shape, Rng& rng, double lo, double hi) {
  std::vector<Real> v(numel_of(shape));
  for (Real& x : v) x = static_cast<Real>(rng.uniform(lo, hi));
  return Tensor(std::move(shape), std::move(v));
}

void randomize(ParamStore& store, Rng& rng) {
  for (const Parameter& p : store.params()) {
    Tensor t = p.tensor;
    const bool gain = p.name.find("gain") != std::string::npos;
    const bool offset_bias = p.name.find("offset_head.bias") != std::string::npos;
    for (Real& x : t.data_mut()) {
      if (gain) {
        x = static_cast<Real>(rng.uniform(0.8, 1.2));
      } else if (offset_bias) {
        x = static_cast<Real>(rng.uniform(-2.0, 2.0));
      } else {
        x = static_cast<Real>(rng.uniform(-0.6, 0.6));
      }
    }
  }
}

std::vector<Tensor> tensors_of(const ParamStore& store) {
  std::vector<Tensor> out;
  for (const Parameter& p : store.params()) out.push_back(p.tensor);
  return out;
}

// Weighted sum with fixed random weights so that every output coordinate
// carries a distinct gradient.
Tensor probe(const Tensor& out, const Tensor& weights) { return sum(mul(out, weights)); }

// Same gradient as probe(out(), weights), but measured against the
// unperturbed output: the scalar stays near zero, so its own rounding does
// not swamp small central differences.
GradReport check_probe(const std::function<Tensor()>& out, const Tensor& weights,
                       const std::vector<Tensor>& inputs, double h, double tol) {
  Tensor base;
  {
    NoGradGuard guard;
    base = out().detach();
  }
  return grad_check([&] { return sum(mul(sub(out(), base), weights)); }, inputs, h, tol);
}

double kink_distance(double g) { return std::abs(g - std::round(g)); }

bool near_kink(std::span<const Unit2> refs, const Tensor& offsets,
               const std::vector<Tensor>& levels, const DeformAttnDims& d) {
  const std::size_t per = d.heads * d.levels * d.samples * 2;
  for (std::size_t n = 0; n < refs.size(); ++n) {
    for (std::size_t m = 0; m < d.heads; ++m) {
      for (std::size_t l = 0; l < d.levels; ++l) {
        const double w = static_cast<double>(levels[l].dim(2));
        const double h = static_cast<double>(levels[l].dim(1));
        for (std::size_t k = 0; k < d.samples; ++k) {
          const std::size_t base = n * per + ((m * d.levels + l) * d.samples + k) * 2;
          const double gx = refs[n].a * w + offsets[base] - 0.5;
          const double gy = refs[n].b * h + offsets[base + 1] - 0.5;
          if (kink_distance(gx) < kKinkMargin || kink_distance(gy) < kKinkMargin) return true;
        }
      }
    }
  }
  return false;
}

bool near_kink(const Tensor& queries, std::span<const Unit2> refs, const FeaturePyramid& pyramid,
               const DeformAttnParams& params) {
  NoGradGuard guard;
  return near_kink(refs, sampling_offsets(queries, params), pyramid.levels, params.dims);
}

std::vector<Unit2> random_refs(std::size_t n, Rng& rng) {
  std::vector<Unit2> refs(n);
  for (Unit2& r : refs) r = {rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)};
  return refs;
}

// References one third apart: for map extents dividing 3 or 6, every query
// then sits at the same fractional cell position on every level.
std::vector<Unit2> lattice_refs(std::size_t n, Rng& rng, std::size_t per_axis = 3) {
  const double step = 1.0 / static_cast<double>(per_axis);
  const double a = rng.uniform(0.02, step - 0.02), b = rng.uniform(0.02, step - 0.02);
  std::vector<Unit2> refs(n);
  for (std::size_t i = 0; i < n; ++i) {
    refs[i] = {a + static_cast<double>(i % per_axis) * step,
               b + static_cast<double>((i / per_axis) % per_axis) * step};
  }
  return refs;
}

// Rewrites the offset head so that, up to a small query-dependent term,
// every sample of a query at `ref` lands in the middle band of a cell. Far
// corner weights stay large enough for the finite differences to resolve
// every map gradient.
void center_samples(const DeformAttnParams& params, const Unit2& ref,
                    const std::vector<Tensor>& levels, Rng& rng) {
  Tensor w = params.offset_weight;
  for (Real& x : w.data_mut()) x = static_cast<Real>(rng.uniform(-0.01, 0.01));
  Tensor b = params.offset_bias;
  auto bias = b.data_mut();
  const DeformAttnDims& d = params.dims;
  for (std::size_t m = 0; m < d.heads; ++m) {
    for (std::size_t l = 0; l < d.levels; ++l) {
      const double ext[2] = {static_cast<double>(levels[l].dim(2)),
                             static_cast<double>(levels[l].dim(1))};
      const double at[2] = {ref.a, ref.b};
      for (std::size_t k = 0; k < d.samples; ++k) {
        for (std::size_t axis = 0; axis < 2; ++axis) {
          const double g = at[axis] * ext[axis];
          const double shift = static_cast<double>(rng.below(5)) - 2.0;
          bias[((m * d.levels + l) * d.samples + k) * 2 + axis] =
              static_cast<Real>(shift + rng.uniform(0.3, 0.7) + 0.5 - (g - std::floor(g)));
        }
      }
    }
  }
}

GradReport check_elementwise(Rng& rng, double h, double tol) {
  Tensor a = random_tensor({3, 4}, rng, -1, 1);
  Tensor b = random_tensor({4}, rng, -1, 1);
  const Tensor w = random_tensor({4, 4}, rng, -1, 1);
  const std::size_t rows[] = {2, 0, 2, 1};
  auto f = [=] {
    const Tensor e = add(mul(exp(scale(a, 0.5)), b), sub(a, add_scalar(b, 0.3)));
    const Tensor parts = concat({narrow(e, 1, 1, 3), narrow(e, 1, 0, 1)}, 1);
    const Tensor t = permute(reshape(index_rows(parts, rows), {2, 2, 4}), {2, 0, 1});
    return add(probe(reshape(t, {4, 4}), w), mean(mul(e, e)));
  };
  return grad_check(f, {a, b}, h, tol);
}

GradReport check_matmul(Rng& rng, double h, double tol) {
  Tensor a = random_tensor({2, 3, 4}, rng, -1, 1);
  Tensor b = random_tensor({2, 4, 5}, rng, -1, 1);
  const Tensor w = random_tensor({2, 3, 5}, rng, -1, 1);
  return check_probe([=] { return matmul(a, b); }, w, {a, b}, h, tol);
}

GradReport check_linear(Rng& rng, double h, double tol) {
  Tensor x = random_tensor({5, 4}, rng, -1, 1);
  Tensor wt = random_tensor({4, 3}, rng, -1, 1);
  Tensor b = random_tensor({3}, rng, -1, 1);
  const Tensor w = random_tensor({5, 3}, rng, -1, 1);
  return check_probe([=] { return linear(x, wt, b); }, w, {x, wt, b}, h, tol);
}

GradReport check_softmax(Rng& rng, double h, double tol) {
  Tensor x = random_tensor({3, 5}, rng, -2, 2);
  const Tensor w1 = random_tensor({3, 5}, rng, -1, 1);
  const Tensor w0 = random_tensor({3, 5}, rng, -1, 1);
  return grad_check([=] { return add(probe(softmax(x, 1), w1), probe(softmax(x, 0), w0)); }, {x},
                    h, tol);
}

GradReport check_layer_norm(Rng& rng, double h, double tol) {
  Tensor x = random_tensor({4, 6}, rng, -2, 2);
  Tensor g = random_tensor({6}, rng, 0.5, 1.5);
  Tensor b = random_tensor({6}, rng, -1, 1);
  const Tensor w = random_tensor({4, 6}, rng, -1, 1);
  return check_probe([=] { return layer_norm(x, g, b); }, w, {x, g, b}, h, tol);
}

GradReport check_conv2d(Rng& rng, double h, double tol) {
  Tensor x = random_tensor({2, 7, 7}, rng, -1, 1);
  Tensor k = random_tensor({3, 2, 3, 3}, rng, -1, 1);
  Tensor b = random_tensor({3}, rng, -1, 1);
  const Tensor w = random_tensor({3, 4, 4}, rng, -1, 1);
  return check_probe([=] { return conv2d(x, k, b, 2, 1); }, w, {x, k, b}, h, tol);
}

GradReport check_cross_entropy(Rng& rng, double h, double tol) {
  Tensor logits = random_tensor({5, 4}, rng, -2, 2);
  std::vector<std::size_t> targets(5);
  for (std::size_t& t : targets) t = rng.below(4);
  return grad_check([=] { return cross_entropy(logits, targets); }, {logits}, h, tol);
}

GradReport check_bilinear(Rng& rng, double h, double tol) {
  for (int attempt = 0; attempt < kMaxRedraws; ++attempt) {
    Tensor map = random_tensor({3, 5, 6}, rng, -1, 1);
    Tensor uv = random_tensor({2}, rng, -0.1, 1.1);
    const Tensor w = random_tensor({3}, rng, -1, 1);
    if (kink_distance(uv[0] * 6 - 0.5) < kKinkMargin || kink_distance(uv[1] * 5 - 0.5) < kKinkMargin) {
      continue;
    }
    return check_probe([=] { return bilinear_sample(map, uv); }, w, {map, uv}, h, tol);
  }
  throw Error("no kink-free bilinear instance");
}

GradReport check_deform_attn(Rng& rng, double h, double tol) {
  const DeformAttnDims dims{8, 2, 1, 3};
  for (int attempt = 0; attempt < kMaxRedraws; ++attempt) {
    ParamStore store;
    Rng init = rng.fork(static_cast<std::uint64_t>(attempt));
    const DeformAttnParams params =
        DeformAttnParams::create(store, "attn", dims, OffsetMode::learned, init, "demf");
    randomize(store, rng);
    Tensor q = random_tensor({8}, rng, -1, 1);
    Tensor x = random_tensor({8, 5, 6}, rng, -1, 1);
    const Unit2 p = random_refs(1, rng).front();
    const Tensor w = random_tensor({8}, rng, -1, 1);
    const FeaturePyramid single{{x}};
    center_samples(params, p, single.levels, rng);
    const Unit2 refs[1] = {p};
    if (near_kink(reshape(q, {1, 8}), refs, single, params)) continue;
    std::vector<Tensor> inputs{q, x};
    for (const Tensor& t : tensors_of(store)) inputs.push_back(t);
    return check_probe([=] { return deform_attn(q, p, x, params); }, w, inputs, h, tol);
  }
  throw Error("no kink-free deform_attn instance");
}

GradReport check_ms_deform_attn(Rng& rng, double h, double tol) {
  const DeformAttnDims dims{8, 2, 2, 2};
  const std::size_t n = 3;
  for (int attempt = 0; attempt < kMaxRedraws; ++attempt) {
    ParamStore store;
    Rng init = rng.fork(static_cast<std::uint64_t>(attempt));
    const DeformAttnParams params =
        DeformAttnParams::create(store, "attn", dims, OffsetMode::learned, init, "demf");
    randomize(store, rng);
    Tensor q = random_tensor({n, 8}, rng, -1, 1);
    FeaturePyramid pyramid{{random_tensor({8, 6, 6}, rng, -1, 1), random_tensor({8, 3, 3}, rng, -1, 1)}};
    const std::vector<Unit2> refs = lattice_refs(n, rng);
    const Tensor w = random_tensor({n, 8}, rng, -1, 1);
    center_samples(params, refs.front(), pyramid.levels, rng);
    if (near_kink(q, refs, pyramid, params)) continue;
    std::vector<Tensor> inputs{q, pyramid.levels[0], pyramid.levels[1]};
    for (const Tensor& t : tensors_of(store)) inputs.push_back(t);
    return check_probe([=] { return ms_deform_attn(q, refs, pyramid, params); }, w, inputs, h, tol);
  }
  throw Error("no kink-free ms_deform_attn instance");
}

GradReport check_self_attn(Rng& rng, double h, double tol) {
  ParamStore store;
  Rng init = rng.fork(1);
  const SelfAttnParams params = SelfAttnParams::create(store, "self", 8, 2, init, "demf");
  randomize(store, rng);
  Tensor zs = random_tensor({4, 8}, rng, -1, 1);
  Tensor pos = random_tensor({4, 8}, rng, -1, 1);
  const Tensor w = random_tensor({4, 8}, rng, -1, 1);
  std::vector<Tensor> inputs{zs, pos};
  for (const Tensor& t : tensors_of(store)) inputs.push_back(t);
  return check_probe([=] { return self_attn(zs, pos, params); }, w, inputs, h, tol);
}

GradReport check_demf_layer(Rng& rng, double h, double tol) {
  DeMFConfig cfg;
  const std::size_t c = 8;
  cfg.channels = c;
  cfg.heads = 2;
  cfg.samples = 2;
  cfg.levels = 2;
  cfg.layers = 1;
  cfg.dropout = 0.0;
  const std::size_t n = 2;
  for (int attempt = 0; attempt < kMaxRedraws; ++attempt) {
    ParamStore store;
    Rng init = rng.fork(static_cast<std::uint64_t>(attempt));
    const DeMFLayerParams params = DeMFLayerParams::create(store, "layer", cfg, init);
    randomize(store, rng);
    Tensor feats = random_tensor({n, c}, rng, -1, 1);
    Tensor pos = random_tensor({n, c}, rng, -1, 1);
        FeaturePyramid pyramid{{random_tensor({c, 4, 4}, rng, -1, 1), random_tensor({c, 2, 2}, rng, -1, 1)}};
    const std::vector<Unit2> refs = lattice_refs(n, rng, 2);
    const std::vector<std::uint8_t> valid(n, 1);
    center_samples(*params.cross_attn, refs.front(), pyramid.levels, rng);
    const Tensor w = random_tensor({n, c}, rng, -1, 1);
    {
      NoGradGuard guard;
      const Tensor z = layer_norm(add(feats, self_attn(feats, pos, params.self_attn)),
                                  params.norm1_gain, params.norm1_bias);
      if (near_kink(add(z, pos), refs, pyramid, *params.cross_attn)) continue;
    }
    std::vector<Tensor> inputs{feats, pos, pyramid.levels[0], pyramid.levels[1]};
    for (const Tensor& t : tensors_of(store)) inputs.push_back(t);
    auto f = [=] {
      ForwardContext ctx{false, nullptr};
      return demf_layer(feats, refs, valid, &pyramid, pos, params, cfg, ctx);
    };
    return check_probe(f, w, inputs, h, tol);
  }
  throw Error("no kink-free demf_layer instance");
}

using CaseFn = GradReport (*)(Rng&, double, double);

struct SuiteEntry {
  const char* name;
  CaseFn fn;
};

const std::vector<SuiteEntry>& entries() {
  static const std::vector<SuiteEntry> kEntries{
      {"elementwise", check_elementwise},   {"matmul", check_matmul},
      {"linear", check_linear},             {"softmax", check_softmax},
      {"layer_norm", check_layer_norm},     {"conv2d", check_conv2d},
      {"cross_entropy", check_cross_entropy}, {"bilinear_sample", check_bilinear},
      {"deform_attn", check_deform_attn},   {"ms_deform_attn", check_ms_deform_attn},
      {"self_attn", check_self_attn},       {"demf_layer", check_demf_layer},
  };
  return kEntries;
}

}  // namespace

const std::vector<std::string>& grad_suite_ops() {
  static const std::vector<std::string> kOps = [] {
    std::vector<std::string> ops;
    for (const SuiteEntry& e : entries()) ops.emplace_back(e.name);
    return ops;
  }();
  return kOps;
}

GradCase run_grad_case(const std::string& op, std::uint64_t seed, double h, double tol) {
  for (const SuiteEntry& e : entries()) {
    if (op != e.name) continue;
    Rng rng(seed, kSuiteStream);
    std::uint64_t tag = 0xcbf29ce484222325ULL;  // FNV-1a of the op name
    for (unsigned char ch : op) tag = (tag ^ ch) * 0x100000001b3ULL;
    Rng op_rng = rng.fork(tag);
    return {op, seed, e.fn(op_rng, h, tol)};
  }
  throw ConfigInvalid("unknown grad-check op '" + op + "'");
}

std::vector<GradCase> run_grad_suite(const GradSuiteSettings& settings,
                                     const std::function<void(const GradCase&)>& on_case) {
  const std::vector<std::string>& ops = settings.ops.empty() ? grad_suite_ops() : settings.ops;
  std::vector<GradCase> cases;
  for (const std::string& op : ops) {
    for (std::size_t s = 0; s < settings.seeds; ++s) {
      cases.push_back(run_grad_case(op, settings.base_seed + s, settings.h, settings.tolerance));
      if (on_case) on_case(cases.back());
    }
  }
  return cases;
}

}  // namespace demf
