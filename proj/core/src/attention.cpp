#include "demf/attention.hpp"

#include <cmath>
#include <numbers>

#include "demf/error.hpp"
#include "demf/ops.hpp"

namespace demf {

void FeaturePyramid::validate() const {
  if (levels.empty()) throw ShapeMismatch("feature pyramid", {}, {});
  const std::size_t c = levels.front().rank() == 3 ? levels.front().dim(0) : 0;
  for (const Tensor& level : levels) {
    if (level.rank() != 3 || level.dim(0) != c) {
      throw ShapeMismatch("feature pyramid level", levels.front().shape(), level.shape());
    }
  }
}

std::string to_string(OffsetMode mode) { return mode == OffsetMode::grid ? "grid" : "learned"; }

OffsetMode parse_offset_mode(const std::string& text) {
  if (text == "grid") return OffsetMode::grid;
  if (text == "learned") return OffsetMode::learned;
  throw Error("offset mode must be 'grid' or 'learned', got '" + text + "'");
}

DeformAttnParams DeformAttnParams::create(ParamStore& store, const std::string& prefix,
                                          const DeformAttnDims& dims, OffsetMode mode, Rng& rng,
                                          const std::string& group) {
  const std::size_t c = dims.channels, m = dims.heads, l = dims.levels, k = dims.samples;
  if (m == 0 || l == 0 || k == 0 || c == 0 || c % m != 0) {
    throw ShapeMismatch("deformable attention dims", {c, m}, {l, k});
  }
  if (mode == OffsetMode::grid) grid_offsets(dims);  // validates K

  DeformAttnParams p;
  p.dims = dims;
  p.mode = mode;
  p.value_proj = store.uniform(prefix + ".value_proj", {m, c, c / m}, c, rng, group);
  p.output_proj = store.uniform(prefix + ".output_proj", {c, c}, c, rng, group);
  if (mode == OffsetMode::learned) {
    p.offset_weight = store.zeros(prefix + ".offset_head.weight", {c, m * l * k * 2}, group);
    std::vector<Real> ring(m * l * k * 2);
    for (std::size_t mi = 0; mi < m; ++mi)
      for (std::size_t li = 0; li < l; ++li)
        for (std::size_t ki = 0; ki < k; ++ki) {
          const double angle = 2.0 * std::numbers::pi * static_cast<double>(mi * k + ki) /
                               static_cast<double>(m * k);
          const double radius = static_cast<double>(ki + 1);
          const std::size_t base = ((mi * l + li) * k + ki) * 2;
          ring[base] = static_cast<Real>(radius * std::cos(angle));
          ring[base + 1] = static_cast<Real>(radius * std::sin(angle));
        }
    p.offset_bias = store.add(prefix + ".offset_head.bias", Tensor({m * l * k * 2}, ring), group);
  }
  p.attn_weight = store.zeros(prefix + ".weight_head.weight", {c, m * l * k}, group);
  p.attn_bias = store.zeros(prefix + ".weight_head.bias", {m * l * k}, group);
  return p;
}

namespace {

struct Corner {
  std::ptrdiff_t x;
  std::ptrdiff_t y;
  Real w;
  Real dw_dx;  // derivative of the weight w.r.t. the continuous grid x
  Real dw_dy;
};

// Bilinear stencil at normalized (u, v) for a H x W map.
std::array<Corner, 4> stencil(Real u, Real v, std::size_t h, std::size_t w) {
  const Real gx = u * static_cast<Real>(w) - Real{0.5};
  const Real gy = v * static_cast<Real>(h) - Real{0.5};
  const Real x0 = std::floor(gx);
  const Real y0 = std::floor(gy);
  const Real fx = gx - x0;
  const Real fy = gy - y0;
  const auto ix = static_cast<std::ptrdiff_t>(x0);
  const auto iy = static_cast<std::ptrdiff_t>(y0);
  return {{{ix, iy, (1 - fx) * (1 - fy), -(1 - fy), -(1 - fx)},
           {ix + 1, iy, fx * (1 - fy), (1 - fy), -fx},
           {ix, iy + 1, (1 - fx) * fy, -fy, (1 - fx)},
           {ix + 1, iy + 1, fx * fy, fy, fx}}};
}

bool inside(const Corner& c, std::size_t h, std::size_t w) {
  return c.x >= 0 && c.y >= 0 && c.x < static_cast<std::ptrdiff_t>(w) &&
         c.y < static_cast<std::ptrdiff_t>(h);
}

void check_map(const Tensor& map) {
  if (map.rank() != 3) throw ShapeMismatch("bilinear_sample map", map.shape(), {3});
}

}  // namespace

Tensor bilinear_sample(const Tensor& map, const Tensor& uv) {
  check_map(map);
  if (uv.numel() != 2) throw ShapeMismatch("bilinear_sample uv", uv.shape(), {2});
  const std::size_t c = map.dim(0), h = map.dim(1), w = map.dim(2);
  const auto corners = stencil(uv[0], uv[1], h, w);
  const auto ms = map.data();
  std::vector<Real> out(c, Real{0});
  for (const Corner& k : corners) {
    if (!inside(k, h, w)) continue;
    const std::size_t off = static_cast<std::size_t>(k.y) * w + static_cast<std::size_t>(k.x);
    for (std::size_t ch = 0; ch < c; ++ch) out[ch] += k.w * ms[ch * h * w + off];
  }
  return make_result({c}, std::move(out), {map, uv},
                     [map, uv, corners, c, h, w](const detail::Node& self) {
    const auto& go = self.grad;
    if (map.requires_grad()) {
      auto gm = map.node()->ensure_grad();
      for (const Corner& k : corners) {
        if (!inside(k, h, w)) continue;
        const std::size_t off = static_cast<std::size_t>(k.y) * w + static_cast<std::size_t>(k.x);
        for (std::size_t ch = 0; ch < c; ++ch) gm[ch * h * w + off] += k.w * go[ch];
      }
    }
    if (uv.requires_grad()) {
      const auto ms = map.data();
      Real gx = 0, gy = 0;
      for (const Corner& k : corners) {
        if (!inside(k, h, w)) continue;
        const std::size_t off = static_cast<std::size_t>(k.y) * w + static_cast<std::size_t>(k.x);
        Real dot = 0;
        for (std::size_t ch = 0; ch < c; ++ch) dot += go[ch] * ms[ch * h * w + off];
        gx += k.dw_dx * dot;
        gy += k.dw_dy * dot;
      }
      auto guv = uv.node()->ensure_grad();
      guv[0] += gx * static_cast<Real>(w);
      guv[1] += gy * static_cast<Real>(h);
    }
  });
}

Tensor bilinear_sample(const Tensor& map, const Unit2& uv) {
  return bilinear_sample(map, Tensor({2}, {static_cast<Real>(uv.a), static_cast<Real>(uv.b)}));
}

Tensor deform_sample(const std::vector<Tensor>& levels, std::span<const Unit2> refs,
                     std::span<const std::uint8_t> valid, const Tensor& offsets,
                     const Tensor& weights, std::size_t heads, std::size_t samples) {
  if (levels.empty()) throw ShapeMismatch("deform_sample levels", {}, {});
  for (const Tensor& level : levels) check_map(level);
  const std::size_t n = refs.size();
  const std::size_t m = heads, l = levels.size(), k = samples;
  const std::size_t c = levels.front().dim(0);
  if (offsets.numel() != n * m * l * k * 2) {
    throw ShapeMismatch("deform_sample offsets", offsets.shape(), {n, m * l * k * 2});
  }
  if (weights.numel() != n * m * l * k) {
    throw ShapeMismatch("deform_sample weights", weights.shape(), {n, m, l * k});
  }
  if (!valid.empty() && valid.size() != n) {
    throw ShapeMismatch("deform_sample valid mask", {valid.size()}, {n});
  }
  std::vector<Unit2> ref_copy(refs.begin(), refs.end());
  std::vector<std::uint8_t> valid_copy(valid.begin(), valid.end());

  const auto os = offsets.data();
  const auto ws = weights.data();
  std::vector<Real> out(m * n * c, Real{0});
  for (std::size_t ni = 0; ni < n; ++ni) {
    if (!valid_copy.empty() && !valid_copy[ni]) continue;
    for (std::size_t mi = 0; mi < m; ++mi) {
      Real* po = out.data() + (mi * n + ni) * c;
      for (std::size_t li = 0; li < l; ++li) {
        const auto ms = levels[li].data();
        const std::size_t h = levels[li].dim(1), w = levels[li].dim(2);
        for (std::size_t ki = 0; ki < k; ++ki) {
          const std::size_t s = (mi * l + li) * k + ki;
          const Real a = ws[(ni * m + mi) * l * k + li * k + ki];
          const Real u = static_cast<Real>(ref_copy[ni].a) + os[(ni * m * l * k + s) * 2] / static_cast<Real>(w);
          const Real v = static_cast<Real>(ref_copy[ni].b) + os[(ni * m * l * k + s) * 2 + 1] / static_cast<Real>(h);
          for (const Corner& cr : stencil(u, v, h, w)) {
            if (!inside(cr, h, w)) continue;
            const Real f = a * cr.w;
            const std::size_t off = static_cast<std::size_t>(cr.y) * w + static_cast<std::size_t>(cr.x);
            for (std::size_t ch = 0; ch < c; ++ch) po[ch] += f * ms[ch * h * w + off];
          }
        }
      }
    }
  }

  std::vector<Tensor> inputs = levels;
  inputs.push_back(offsets);
  inputs.push_back(weights);
  return make_result({m, n, c}, std::move(out), inputs,
                     [levels, offsets, weights, ref_copy = std::move(ref_copy),
                      valid_copy = std::move(valid_copy), n, m, l, k, c](const detail::Node& self) {
    const auto os = offsets.data();
    const auto ws = weights.data();
    const bool want_off = offsets.requires_grad();
    const bool want_w = weights.requires_grad();
    std::span<Real> goff = want_off ? offsets.node()->ensure_grad() : std::span<Real>{};
    std::span<Real> gw = want_w ? weights.node()->ensure_grad() : std::span<Real>{};
    for (std::size_t li = 0; li < l; ++li) {
      const Tensor& level = levels[li];
      const auto ms = level.data();
      const std::size_t h = level.dim(1), w = level.dim(2);
      std::span<Real> gm = level.requires_grad() ? level.node()->ensure_grad() : std::span<Real>{};
      for (std::size_t ni = 0; ni < n; ++ni) {
        if (!valid_copy.empty() && !valid_copy[ni]) continue;
        for (std::size_t mi = 0; mi < m; ++mi) {
          const Real* go = self.grad.data() + (mi * n + ni) * c;
          for (std::size_t ki = 0; ki < k; ++ki) {
            const std::size_t s = (mi * l + li) * k + ki;
            const std::size_t wi = (ni * m + mi) * l * k + li * k + ki;
            const std::size_t oi = (ni * m * l * k + s) * 2;
            const Real a = ws[wi];
            const Real u = static_cast<Real>(ref_copy[ni].a) + os[oi] / static_cast<Real>(w);
            const Real v = static_cast<Real>(ref_copy[ni].b) + os[oi + 1] / static_cast<Real>(h);
            Real g_sample = 0, g_x = 0, g_y = 0;
            for (const Corner& cr : stencil(u, v, h, w)) {
              if (!inside(cr, h, w)) continue;
              const std::size_t off = static_cast<std::size_t>(cr.y) * w + static_cast<std::size_t>(cr.x);
              Real dot = 0;
              for (std::size_t ch = 0; ch < c; ++ch) dot += go[ch] * ms[ch * h * w + off];
              g_sample += cr.w * dot;
              g_x += cr.dw_dx * dot;
              g_y += cr.dw_dy * dot;
              if (!gm.empty()) {
                const Real f = a * cr.w;
                for (std::size_t ch = 0; ch < c; ++ch) gm[ch * h * w + off] += f * go[ch];
              }
            }
            if (want_w) gw[wi] += g_sample;
            // d(grid x)/d(offset) = W * (1/W) = 1 on every level
            if (want_off) {
              goff[oi] += a * g_x;
              goff[oi + 1] += a * g_y;
            }
          }
        }
      }
    }
  });
}

std::vector<Real> grid_offsets(const DeformAttnDims& dims) {
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(dims.samples))));
  if (side * side != dims.samples) throw NonSquareK(dims.samples);
  const Real centre = static_cast<Real>(side - 1) / Real{2};
  std::vector<Real> pattern(dims.heads * dims.levels * dims.samples * 2);
  for (std::size_t mi = 0; mi < dims.heads; ++mi)
    for (std::size_t li = 0; li < dims.levels; ++li)
      for (std::size_t ki = 0; ki < dims.samples; ++ki) {
        const std::size_t base = ((mi * dims.levels + li) * dims.samples + ki) * 2;
        pattern[base] = static_cast<Real>(ki % side) - centre;
        pattern[base + 1] = static_cast<Real>(ki / side) - centre;
      }
  return pattern;
}

namespace {

Tensor grid_offsets_for(std::size_t n, const DeformAttnDims& dims) {
  const std::vector<Real> pattern = grid_offsets(dims);
  std::vector<Real> all;
  all.reserve(n * pattern.size());
  for (std::size_t i = 0; i < n; ++i) all.insert(all.end(), pattern.begin(), pattern.end());
  return Tensor({n, pattern.size()}, std::move(all));
}

void check_queries(const Tensor& queries, const DeformAttnParams& params) {
  if (queries.rank() != 2 || queries.dim(1) != params.dims.channels) {
    throw ShapeMismatch("deformable attention queries", queries.shape(),
                        {queries.rank() ? queries.dim(0) : 0, params.dims.channels});
  }
}

Tensor attend(const Tensor& queries, std::span<const Unit2> refs, const FeaturePyramid& pyramid,
              const DeformAttnParams& params, std::span<const std::uint8_t> valid, bool grid) {
  check_queries(queries, params);
  pyramid.validate();
  const DeformAttnDims& d = params.dims;
  if (pyramid.num_levels() != d.levels) throw LevelMismatch(d.levels, pyramid.num_levels());
  if (pyramid.channels() != d.channels) {
    throw ShapeMismatch("pyramid channels", pyramid.levels.front().shape(), {d.channels});
  }
  const std::size_t n = queries.dim(0);
  if (refs.size() != n) throw ShapeMismatch("reference points", {refs.size()}, {n});

  const Tensor offsets = grid ? grid_offsets_for(n, d) : sampling_offsets(queries, params);
  const Tensor weights = attention_weights(queries, params);
  const Tensor sampled = deform_sample(pyramid.levels, refs, valid, offsets, weights, d.heads,
                                       d.samples);                     // (M, N, C)
  const Tensor per_head = matmul(sampled, params.value_proj);         // (M, N, C/M)
  const Tensor merged = reshape(permute(per_head, {1, 0, 2}), {n, d.channels});
  return matmul(merged, params.output_proj);
}

}  // namespace

Tensor attention_weights(const Tensor& queries, const DeformAttnParams& params) {
  check_queries(queries, params);
  const DeformAttnDims& d = params.dims;
  const Tensor logits = linear(queries, params.attn_weight, params.attn_bias);
  return softmax(reshape(logits, {queries.dim(0), d.heads, d.levels * d.samples}), 2);
}

Tensor sampling_offsets(const Tensor& queries, const DeformAttnParams& params) {
  check_queries(queries, params);
  if (params.mode == OffsetMode::grid) return grid_offsets_for(queries.dim(0), params.dims);
  return linear(queries, params.offset_weight, params.offset_bias);
}

Tensor ms_deform_attn(const Tensor& queries, std::span<const Unit2> refs,
                      const FeaturePyramid& pyramid, const DeformAttnParams& params,
                      std::span<const std::uint8_t> valid) {
  return attend(queries, refs, pyramid, params, valid, params.mode == OffsetMode::grid);
}

namespace {

Tensor as_row(const Tensor& q) {
  if (q.rank() != 1) throw ShapeMismatch("query", q.shape(), {q.numel()});
  return reshape(q, {1, q.dim(0)});
}

}  // namespace

Tensor deform_attn(const Tensor& q, const Unit2& p, const Tensor& x,
                   const DeformAttnParams& params) {
  if (params.dims.levels != 1) throw LevelMismatch(params.dims.levels, 1);
  FeaturePyramid single{{x}};
  const Unit2 refs[1] = {p};
  return reshape(ms_deform_attn(as_row(q), refs, single, params), {params.dims.channels});
}

Tensor ms_deform_attn(const Tensor& q, const Unit2& p_hat, const FeaturePyramid& pyramid,
                      const DeformAttnParams& params) {
  const Unit2 refs[1] = {p_hat};
  return reshape(ms_deform_attn(as_row(q), refs, pyramid, params), {params.dims.channels});
}

Tensor grid_deform_attn(const Tensor& q, const Unit2& p_hat, const FeaturePyramid& pyramid,
                        const DeformAttnParams& params) {
  const Unit2 refs[1] = {p_hat};
  return reshape(attend(as_row(q), refs, pyramid, params, {}, true), {params.dims.channels});
}

SelfAttnParams SelfAttnParams::create(ParamStore& store, const std::string& prefix,
                                      std::size_t channels, std::size_t heads, Rng& rng,
                                      const std::string& group) {
  if (heads == 0 || channels % heads != 0) {
    throw ShapeMismatch("self-attention dims", {channels}, {heads});
  }
  SelfAttnParams p;
  p.heads = heads;
  const std::size_t c = channels;
  p.wq = store.uniform(prefix + ".q.weight", {c, c}, c, rng, group);
  p.bq = store.zeros(prefix + ".q.bias", {c}, group);
  p.wk = store.uniform(prefix + ".k.weight", {c, c}, c, rng, group);
  p.wv = store.uniform(prefix + ".v.weight", {c, c}, c, rng, group);
  p.bv = store.zeros(prefix + ".v.bias", {c}, group);
  p.wo = store.uniform(prefix + ".out.weight", {c, c}, c, rng, group);
  p.bo = store.zeros(prefix + ".out.bias", {c}, group);
  return p;
}

Tensor self_attn(const Tensor& zs, const Tensor& pos, const SelfAttnParams& params) {
  if (zs.rank() != 2 || zs.shape() != pos.shape()) {
    throw ShapeMismatch("self_attn", zs.shape(), pos.shape());
  }
  const std::size_t n = zs.dim(0), c = zs.dim(1), m = params.heads;
  if (params.wq.dim(0) != c) throw ShapeMismatch("self_attn weights", zs.shape(), params.wq.shape());
  const std::size_t d = c / m;
  const Tensor qk_in = add(zs, pos);
  const Tensor q = permute(reshape(linear(qk_in, params.wq, params.bq), {n, m, d}), {1, 0, 2});
  const Tensor kt = permute(reshape(linear(qk_in, params.wk), {n, m, d}), {1, 2, 0});
  const Tensor v = permute(reshape(linear(zs, params.wv, params.bv), {n, m, d}), {1, 0, 2});
  const Tensor scores = scale(matmul(q, kt), Real{1} / std::sqrt(static_cast<Real>(d)));
  const Tensor attn = softmax(scores, 2);                                 // (M, N, N)
  const Tensor heads = permute(matmul(attn, v), {1, 0, 2});               // (N, M, d)
  return linear(reshape(heads, {n, c}), params.wo, params.bo);
}

}  // namespace demf
