#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "demf/rng.hpp"
#include "demf/tensor.hpp"

namespace demf {

// Elementwise arithmetic. `b` must either match `a` exactly or match a
// trailing suffix of `a`'s shape, in which case it is broadcast over the
// leading axes (bias-style broadcasting).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real factor);
Tensor add_scalar(const Tensor& a, Real value);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// (n,k)x(k,m) -> (n,m), or batched (B,n,k)x(B,k,m) -> (B,n,m).
Tensor matmul(const Tensor& a, const Tensor& b);
// x (..., in) times weight (in, out) plus optional bias (out).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor abs(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor softmax(const Tensor& x, std::size_t axis);
// Normalizes over the last axis, then applies gain and bias (both shaped
// like the last axis).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps = 1e-5);
// Inverted dropout: survivors scaled by 1/(1-rate). Identity when not training.
Tensor dropout(const Tensor& x, Real rate, bool training, Rng& rng);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
// Gathers slices along axis 0.
Tensor index_rows(const Tensor& x, std::span<const std::size_t> rows);

// Mean cross-entropy of (N, K) logits against integer targets in [0, K).
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

// Single-image 2D convolution with edge-replicated padding.
// x (Cin, H, W), weight (Cout, Cin, k, k), bias (Cout).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding);

}  // namespace demf
