#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "demf/geometry.hpp"
#include "demf/params.hpp"
#include "demf/rng.hpp"
#include "demf/tensor.hpp"

namespace demf {

// Multi-scale image features: L maps shaped (C, H_l, W_l) sharing C.
struct FeaturePyramid {
  std::vector<Tensor> levels;

  std::size_t num_levels() const { return levels.size(); }
  std::size_t channels() const { return levels.empty() ? 0 : levels.front().dim(0); }
  // Throws ShapeMismatch unless L >= 1 and every level is (C, H, W) with a
  // common C.
  void validate() const;
};

enum class OffsetMode { learned, grid };

std::string to_string(OffsetMode mode);
OffsetMode parse_offset_mode(const std::string& text);

struct DeformAttnDims {
  std::size_t channels = 32;  // C
  std::size_t heads = 4;      // M
  std::size_t levels = 2;     // L
  std::size_t samples = 2;    // K, per head per level
};

// Learned pieces of a deformable attention block.
//   value_proj  (M, C, C/M)  per-head W'_m
//   output_proj (C, C)       rows [m*C/M, (m+1)*C/M) form W_m
//   offset_*    (C, M*L*K*2) sampling offsets in grid cells of the level,
//               laid out [m][l][k][u,v]; absent in grid mode
//   attn_*      (C, M*L*K)   pre-softmax logits laid out [m][l][k]
struct DeformAttnParams {
  DeformAttnDims dims;
  OffsetMode mode = OffsetMode::learned;
  Tensor value_proj;
  Tensor output_proj;
  Tensor offset_weight;
  Tensor offset_bias;
  Tensor attn_weight;
  Tensor attn_bias;

  // Offset weights start at zero with biases placing head m, sample k at
  // angle 2*pi*(m*K + k)/(M*K) and radius k+1 cells on every level;
  // attention logits start at zero (uniform weights).
  static DeformAttnParams create(ParamStore& store, const std::string& prefix,
                                 const DeformAttnDims& dims, OffsetMode mode, Rng& rng,
                                 const std::string& group);
};

// Samples map (C, H, W) at normalized uv with zero padding outside the map.
// Normalized (0, 0) and (1, 1) are the outer corners of the border pixels,
// i.e. grid position = (u*W - 0.5, v*H - 0.5). Differentiable w.r.t. map and
// uv (a 2-vector).
Tensor bilinear_sample(const Tensor& map, const Tensor& uv);
Tensor bilinear_sample(const Tensor& map, const Unit2& uv);

// Fused sampling kernel behind every deformable attention variant.
//   offsets (N, M*L*K*2): cell units, divided by (W_l, H_l) and added to the
//   reference; weights (N, M, L*K): normalized attention weights.
// Returns (M, N, C) with entry [m, n] = sum_{l,k} A[n,m,lk] x_l(ref_n + dp).
// Candidates with valid[n] == 0 produce zero rows.
Tensor deform_sample(const std::vector<Tensor>& levels, std::span<const Unit2> refs,
                     std::span<const std::uint8_t> valid, const Tensor& offsets,
                     const Tensor& weights, std::size_t heads, std::size_t samples);

// Softmaxed attention weights (N, M, L*K) for queries (N, C).
Tensor attention_weights(const Tensor& queries, const DeformAttnParams& params);
// Raw sampling offsets (N, M*L*K*2) in cell units for queries (N, C),
// following params.mode.
Tensor sampling_offsets(const Tensor& queries, const DeformAttnParams& params);
// Fixed sqrt(K) x sqrt(K) grid with one-cell spacing centred on the
// reference, replicated over heads and levels. Throws NonSquareK.
std::vector<Real> grid_offsets(const DeformAttnDims& dims);

// Batched multi-scale deformable attention: queries (N, C), one reference per
// query, output (N, C). `valid` may be empty (all valid).
Tensor ms_deform_attn(const Tensor& queries, std::span<const Unit2> refs,
                      const FeaturePyramid& pyramid, const DeformAttnParams& params,
                      std::span<const std::uint8_t> valid = {});

// Single-query forms. deform_attn requires a one-level parameter set.
Tensor deform_attn(const Tensor& q, const Unit2& p, const Tensor& x,
                   const DeformAttnParams& params);
Tensor ms_deform_attn(const Tensor& q, const Unit2& p_hat, const FeaturePyramid& pyramid,
                      const DeformAttnParams& params);
// Same as ms_deform_attn but always samples on the fixed grid, ignoring any
// offset head.
Tensor grid_deform_attn(const Tensor& q, const Unit2& p_hat, const FeaturePyramid& pyramid,
                        const DeformAttnParams& params);

struct SelfAttnParams {
  std::size_t heads = 4;
  // (C, C) weights, (C) biases. Keys carry no bias: it would shift every
  // score of a query equally and drop out of the softmax.
  Tensor wq, bq, wk, wv, bv, wo, bo;

  static SelfAttnParams create(ParamStore& store, const std::string& prefix, std::size_t channels,
                               std::size_t heads, Rng& rng, const std::string& group);
};

// Multi-head scaled dot-product attention among N candidates: queries and
// keys come from zs + pos, values from zs. Returns the aggregated (N, C)
// update without the residual.
Tensor self_attn(const Tensor& zs, const Tensor& pos, const SelfAttnParams& params);

}  // namespace demf
