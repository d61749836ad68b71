#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "demf/attention.hpp"
#include "demf/eval.hpp"
#include "demf/rng.hpp"
#include "demf/tensor.hpp"

// Helpers and brute-force reference implementations shared by the unit tests
// and the acceptance runner. The references deliberately avoid the library's
// kernels: plain loops over doubles, written from the definitions.
namespace demf::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<Real> v(numel_of(shape));
  for (Real& x : v) x = static_cast<Real>(rng.uniform(lo, hi));
  return Tensor(std::move(shape), std::move(v));
}

inline double max_abs_diff(std::span<const Real> a, std::span<const Real> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return a.size() == b.size() ? worst : std::numeric_limits<double>::infinity();
}

// Tent-weight sum over every pixel of the map: sum_{y,x} max(0,1-|gx-x|) *
// max(0,1-|gy-y|) * map[c,y,x]. Zero padding falls out of summing only real
// pixels.
inline std::vector<double> naive_bilinear(const Tensor& map, double u, double v) {
  const std::size_t c = map.dim(0), h = map.dim(1), w = map.dim(2);
  const double gx = u * static_cast<double>(w) - 0.5;
  const double gy = v * static_cast<double>(h) - 0.5;
  std::vector<double> out(c, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    const double wy = std::max(0.0, 1.0 - std::abs(gy - static_cast<double>(y)));
    if (wy == 0.0) continue;
    for (std::size_t x = 0; x < w; ++x) {
      const double wx = std::max(0.0, 1.0 - std::abs(gx - static_cast<double>(x)));
      if (wx == 0.0) continue;
      for (std::size_t ch = 0; ch < c; ++ch) out[ch] += wx * wy * map[(ch * h + y) * w + x];
    }
  }
  return out;
}

// Term-by-term weighted deformable attention for one query:
//   out = sum_m W_m [ sum_{l,k} A_mlk W'_m x_l(p + dp_mlk) ]
// with A softmaxed jointly over (l, k) per head and dp in grid cells of
// level l. `grid` replaces the offset head by the fixed sqrt(K) lattice.
inline std::vector<double> naive_deform_attn(std::span<const Real> q, const Unit2& p,
                                             const std::vector<Tensor>& levels,
                                             const DeformAttnParams& prm, bool grid) {
  const std::size_t C = prm.dims.channels, M = prm.dims.heads, L = prm.dims.levels,
                    K = prm.dims.samples, D = C / M;
  const std::size_t side = static_cast<std::size_t>(std::lround(std::sqrt(double(K))));

  std::vector<double> out(C, 0.0);
  for (std::size_t m = 0; m < M; ++m) {
    std::vector<double> logit(L * K);
    for (std::size_t j = 0; j < L * K; ++j) {
      const std::size_t col = m * L * K + j;
      double s = prm.attn_bias[col];
      for (std::size_t c = 0; c < C; ++c) s += q[c] * prm.attn_weight[c * (M * L * K) + col];
      logit[j] = s;
    }
    const double top = *std::max_element(logit.begin(), logit.end());
    double z = 0.0;
    for (double& v : logit) z += (v = std::exp(v - top));

    std::vector<double> head(D, 0.0);
    for (std::size_t l = 0; l < L; ++l) {
      const Tensor& x = levels[l];
      const double H = static_cast<double>(x.dim(1)), W = static_cast<double>(x.dim(2));
      for (std::size_t k = 0; k < K; ++k) {
        double du = 0.0, dv = 0.0;
        if (grid) {
          const double centre = (static_cast<double>(side) - 1.0) / 2.0;
          du = static_cast<double>(k % side) - centre;
          dv = static_cast<double>(k / side) - centre;
        } else {
          const std::size_t col = ((m * L + l) * K + k) * 2;
          du = prm.offset_bias[col];
          dv = prm.offset_bias[col + 1];
          for (std::size_t c = 0; c < C; ++c) {
            du += q[c] * prm.offset_weight[c * (M * L * K * 2) + col];
            dv += q[c] * prm.offset_weight[c * (M * L * K * 2) + col + 1];
          }
        }
        const std::vector<double> s = naive_bilinear(x, p.a + du / W, p.b + dv / H);
        const double a = logit[l * K + k] / z;
        for (std::size_t d = 0; d < D; ++d) {
          double proj = 0.0;
          for (std::size_t c = 0; c < C; ++c) proj += prm.value_proj[(m * C + c) * D + d] * s[c];
          head[d] += a * proj;
        }
      }
    }
    for (std::size_t o = 0; o < C; ++o)
      for (std::size_t d = 0; d < D; ++d) out[o] += head[d] * prm.output_proj[(m * D + d) * C + o];
  }
  return out;
}

// O(N^2) multi-head attention: q = (z+pos)Wq + bq, k = (z+pos)Wk, v = zWv + bv.
inline std::vector<double> naive_self_attn(const Tensor& zs, const Tensor& pos,
                                           const SelfAttnParams& prm) {
  const std::size_t N = zs.dim(0), C = zs.dim(1), M = prm.heads, D = C / M;
  auto project = [&](bool with_pos, const Tensor& w, const Tensor* b) {
    std::vector<double> r(N * C, 0.0);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t o = 0; o < C; ++o) {
        double s = b ? (*b)[o] : 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          const double in = zs[i * C + c] + (with_pos ? pos[i * C + c] : 0.0);
          s += in * w[c * C + o];
        }
        r[i * C + o] = s;
      }
    return r;
  };
  const auto q = project(true, prm.wq, &prm.bq);
  const auto k = project(true, prm.wk, nullptr);
  const auto v = project(false, prm.wv, &prm.bv);
  std::vector<double> heads(N * C, 0.0);
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t i = 0; i < N; ++i) {
      std::vector<double> score(N);
      for (std::size_t j = 0; j < N; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < D; ++d) s += q[i * C + m * D + d] * k[j * C + m * D + d];
        score[j] = s / std::sqrt(static_cast<double>(D));
      }
      const double top = *std::max_element(score.begin(), score.end());
      double z = 0.0;
      for (double& s : score) z += (s = std::exp(s - top));
      for (std::size_t j = 0; j < N; ++j)
        for (std::size_t d = 0; d < D; ++d)
          heads[i * C + m * D + d] += score[j] / z * v[j * C + m * D + d];
    }
  std::vector<double> out(N * C, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t o = 0; o < C; ++o) {
      double s = prm.bo[o];
      for (std::size_t c = 0; c < C; ++c) s += heads[i * C + c] * prm.wo[c * C + o];
      out[i * C + o] = s;
    }
  return out;
}

// Enumerates every injective partial map preds -> gts and keeps the ones that
// satisfy the greedy rule visited in score order: a prediction owns a gt iff
// that gt is its best-IoU gt (first on ties), clears the threshold and no
// earlier prediction owns it. Exactly one map qualifies.
inline std::vector<std::vector<std::size_t>> exhaustive_assignments(
    std::span<const Detection> preds, std::span<const GroundTruthBox> gts, double thresh) {
  const std::size_t P = preds.size(), G = gts.size();
  std::vector<std::size_t> order(P);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });

  std::vector<std::vector<std::size_t>> valid;
  std::vector<std::size_t> choice(P, 0);  // 0..G-1 = gt, G = background
  while (true) {
    bool ok = true;
    std::vector<bool> used(G, false);
    for (std::size_t i : order) {
      std::size_t best = G;
      double best_iou = -1.0;
      for (std::size_t g = 0; g < G; ++g) {
        const double v = iou3d(preds[i].box, gts[g].box);
        if (v > best_iou) best_iou = v, best = g;
      }
      const bool should_take = best < G && best_iou >= thresh && !used[best];
      const bool takes = choice[i] < G;
      if (takes != should_take || (takes && choice[i] != best)) {
        ok = false;
        break;
      }
      if (takes) used[choice[i]] = true;
    }
    if (ok) {
      std::vector<std::size_t> a(P);
      for (std::size_t i = 0; i < P; ++i) a[i] = choice[i] < G ? choice[i] : kBackground;
      valid.push_back(std::move(a));
    }
    std::size_t pos = 0;
    while (pos < P && ++choice[pos] > G) choice[pos++] = 0;
    if (pos == P) break;
  }
  return valid;
}

// AP by brute force: for every rank r, precision and recall of the top r;
// area = sum over recall steps of the best precision at equal or higher
// recall.
inline double sweep_ap(const std::vector<std::uint8_t>& tp, std::size_t num_gts) {
  const std::size_t n = tp.size();
  std::vector<double> rec(n), prec(n);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i <= r; ++i) hits += tp[i];
    rec[r] = double(hits) / double(num_gts);
    prec[r] = double(hits) / double(r + 1);
  }
  double area = 0.0, last = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (rec[r] <= last) continue;
    double best = 0.0;
    for (std::size_t s = 0; s < n; ++s)
      if (rec[s] >= rec[r]) best = std::max(best, prec[s]);
    area += (rec[r] - last) * best;
    last = rec[r];
  }
  return area;
}

}  // namespace demf::testing
