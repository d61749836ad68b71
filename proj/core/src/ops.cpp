#include "demf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "demf/error.hpp"

namespace demf {

namespace {

std::span<Real> grad_of(const Tensor& t) { return t.node()->ensure_grad(); }

// Returns b's element count after checking that b's shape is a suffix of a's.
std::size_t broadcast_extent(const char* op, const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sb.size() > sa.size() || !std::equal(sb.rbegin(), sb.rend(), sa.rbegin())) {
    throw ShapeMismatch(op, sa, sb);
  }
  return b.numel();
}

template <typename Forward, typename Backward>
Tensor unary(const Tensor& x, Forward fwd, Backward bwd) {
  std::vector<Real> out(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xs[i]);
  return make_result(x.shape(), std::move(out), {x}, [x, bwd](const detail::Node& self) {
    auto gx = grad_of(x);
    const auto xs = x.data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * bwd(xs[i], self.data[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const std::size_t nb = broadcast_extent("add", a, b);
  std::vector<Real> out(a.data().begin(), a.data().end());
  const auto bs = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bs[i % nb];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b, nb](const detail::Node& self) {
    if (a.requires_grad()) {
      auto ga = grad_of(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (b.requires_grad()) {
      auto gb = grad_of(b);
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % nb] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const std::size_t nb = broadcast_extent("sub", a, b);
  std::vector<Real> out(a.data().begin(), a.data().end());
  const auto bs = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bs[i % nb];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b, nb](const detail::Node& self) {
    if (a.requires_grad()) {
      auto ga = grad_of(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (b.requires_grad()) {
      auto gb = grad_of(b);
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % nb] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const std::size_t nb = broadcast_extent("mul", a, b);
  std::vector<Real> out(a.data().begin(), a.data().end());
  const auto bs = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bs[i % nb];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b, nb](const detail::Node& self) {
    const auto as = a.data();
    const auto bs = b.data();
    if (a.requires_grad()) {
      auto ga = grad_of(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bs[i % nb];
    }
    if (b.requires_grad()) {
      auto gb = grad_of(b);
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % nb] += self.grad[i] * as[i];
    }
  });
}

Tensor scale(const Tensor& a, Real factor) {
  return unary(a, [factor](Real v) { return v * factor; },
               [factor](Real, Real) { return factor; });
}

Tensor add_scalar(const Tensor& a, Real value) {
  return unary(a, [value](Real v) { return v + value; }, [](Real, Real) { return Real{1}; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool batched = a.rank() == 3;
  if (!((a.rank() == 2 && b.rank() == 2) || (a.rank() == 3 && b.rank() == 3))) {
    throw ShapeMismatch("matmul", a.shape(), b.shape());
  }
  const std::size_t batch = batched ? a.dim(0) : 1;
  const std::size_t n = a.dim(a.rank() - 2);
  const std::size_t k = a.dim(a.rank() - 1);
  const std::size_t m = b.dim(b.rank() - 1);
  if (b.dim(b.rank() - 2) != k || (batched && b.dim(0) != batch)) {
    throw ShapeMismatch("matmul", a.shape(), b.shape());
  }
  std::vector<Real> out(batch * n * m, Real{0});
  const auto as = a.data();
  const auto bs = b.data();
  for (std::size_t z = 0; z < batch; ++z) {
    const Real* pa = as.data() + z * n * k;
    const Real* pb = bs.data() + z * k * m;
    Real* po = out.data() + z * n * m;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const Real av = pa[i * k + p];
        if (av == Real{0}) continue;
        for (std::size_t j = 0; j < m; ++j) po[i * m + j] += av * pb[p * m + j];
      }
    }
  }
  Shape shape = batched ? Shape{batch, n, m} : Shape{n, m};
  return make_result(std::move(shape), std::move(out), {a, b},
                     [a, b, batch, n, k, m](const detail::Node& self) {
    const auto as = a.data();
    const auto bs = b.data();
    const Real* go = self.grad.data();
    for (std::size_t z = 0; z < batch; ++z) {
      const Real* pa = as.data() + z * n * k;
      const Real* pb = bs.data() + z * k * m;
      const Real* pg = go + z * n * m;
      if (a.requires_grad()) {
        Real* ga = grad_of(a).data() + z * n * k;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            Real acc = 0;
            for (std::size_t j = 0; j < m; ++j) acc += pg[i * m + j] * pb[p * m + j];
            ga[i * k + p] += acc;
          }
      }
      if (b.requires_grad()) {
        Real* gb = grad_of(b).data() + z * k * m;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const Real av = pa[i * k + p];
            for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += av * pg[i * m + j];
          }
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || x.rank() == 0 || x.shape().back() != weight.dim(0)) {
    throw ShapeMismatch("linear", x.shape(), weight.shape());
  }
  const std::size_t in = weight.dim(0);
  const std::size_t outw = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outw)) {
    throw ShapeMismatch("linear bias", weight.shape(), bias.shape());
  }
  const std::size_t rows = x.numel() / in;
  std::vector<Real> out(rows * outw, Real{0});
  const auto xs = x.data();
  const auto ws = weight.data();
  for (std::size_t r = 0; r < rows; ++r) {
    Real* po = out.data() + r * outw;
    if (bias.defined()) std::copy(bias.data().begin(), bias.data().end(), po);
    for (std::size_t p = 0; p < in; ++p) {
      const Real xv = xs[r * in + p];
      if (xv == Real{0}) continue;
      const Real* pw = ws.data() + p * outw;
      for (std::size_t j = 0; j < outw; ++j) po[j] += xv * pw[j];
    }
  }
  Shape shape = x.shape();
  shape.back() = outw;
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(std::move(shape), std::move(out), inputs,
                     [x, weight, bias, rows, in, outw](const detail::Node& self) {
    const auto xs = x.data();
    const auto ws = weight.data();
    const Real* go = self.grad.data();
    if (x.requires_grad()) {
      auto gx = grad_of(x);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t p = 0; p < in; ++p) {
          Real acc = 0;
          const Real* pw = ws.data() + p * outw;
          for (std::size_t j = 0; j < outw; ++j) acc += go[r * outw + j] * pw[j];
          gx[r * in + p] += acc;
        }
    }
    if (weight.requires_grad()) {
      auto gw = grad_of(weight);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t p = 0; p < in; ++p) {
          const Real xv = xs[r * in + p];
          if (xv == Real{0}) continue;
          Real* pgw = gw.data() + p * outw;
          for (std::size_t j = 0; j < outw; ++j) pgw[j] += xv * go[r * outw + j];
        }
    }
    if (bias.defined() && bias.requires_grad()) {
      auto gb = grad_of(bias);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < outw; ++j) gb[j] += go[r * outw + j];
    }
  });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](Real v) { return v > Real{0} ? v : Real{0}; },
               [](Real v, Real) { return v > Real{0} ? Real{1} : Real{0}; });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

Tensor abs(const Tensor& x) {
  return unary(x, [](Real v) { return std::abs(v); },
               [](Real v, Real) { return v > Real{0} ? Real{1} : (v < Real{0} ? Real{-1} : Real{0}); });
}

Tensor sum(const Tensor& x) {
  // Neumaier-compensated: the result does not depend on how rounding errors
  // of earlier partial sums happen to fall.
  Real total = 0, comp = 0;
  for (const Real v : x.data()) {
    const Real t = total + v;
    comp += std::abs(total) >= std::abs(v) ? (total - t) + v : (v - t) + total;
    total = t;
  }
  total += comp;
  return make_result({}, {total}, {x}, [x](const detail::Node& self) {
    auto gx = grad_of(x);
    for (Real& g : gx) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  return scale(sum(x), Real{1} / static_cast<Real>(x.numel()));
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeMismatch("softmax axis", x.shape(), {axis});
  const Shape& s = x.shape();
  const std::size_t n = s[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  std::vector<Real> out(x.numel());
  const auto xs = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      Real mx = xs[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xs[base + j * inner]);
      Real z = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const Real e = std::exp(xs[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  return make_result(s, std::move(out), {x}, [x, outer, inner, n](const detail::Node& self) {
    auto gx = grad_of(x);
    const auto& y = self.data;
    const auto& gy = self.grad;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        Real dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += gy[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          gx[idx] += y[idx] * (gy[idx] - dot);
        }
      }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps) {
  if (x.rank() == 0) throw ShapeMismatch("layer_norm", x.shape(), gain.shape());
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) {
    throw ShapeMismatch("layer_norm", x.shape(), gain.shape());
  }
  const std::size_t rows = x.numel() / d;
  std::vector<Real> out(x.numel());
  std::vector<Real> xhat(x.numel());
  std::vector<Real> rstd(rows);
  const auto xs = x.data();
  const auto gs = gain.data();
  const auto bs = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* px = xs.data() + r * d;
    Real mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += px[j];
    mu /= static_cast<Real>(d);
    Real var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (px[j] - mu) * (px[j] - mu);
    var /= static_cast<Real>(d);
    rstd[r] = Real{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const Real h = (px[j] - mu) * rstd[r];
      xhat[r * d + j] = h;
      out[r * d + j] = h * gs[j] + bs[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gain, bias},
                     [x, gain, bias, d, rows, xhat = std::move(xhat),
                      rstd = std::move(rstd)](const detail::Node& self) {
    const auto gs = gain.data();
    const auto& go = self.grad;
    if (x.requires_grad()) {
      auto gx = grad_of(x);
      for (std::size_t r = 0; r < rows; ++r) {
        Real m1 = 0, m2 = 0;
        for (std::size_t j = 0; j < d; ++j) {
          const Real gh = go[r * d + j] * gs[j];
          m1 += gh;
          m2 += gh * xhat[r * d + j];
        }
        m1 /= static_cast<Real>(d);
        m2 /= static_cast<Real>(d);
        for (std::size_t j = 0; j < d; ++j) {
          const Real gh = go[r * d + j] * gs[j];
          gx[r * d + j] += rstd[r] * (gh - m1 - xhat[r * d + j] * m2);
        }
      }
    }
    if (gain.requires_grad()) {
      auto gg = grad_of(gain);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gg[j] += go[r * d + j] * xhat[r * d + j];
    }
    if (bias.requires_grad()) {
      auto gb = grad_of(bias);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gb[j] += go[r * d + j];
    }
  });
}

Tensor dropout(const Tensor& x, Real rate, bool training, Rng& rng) {
  if (!(rate >= Real{0} && rate < Real{1})) {
    throw Error("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == Real{0}) return x;
  const Real keep_scale = Real{1} / (Real{1} - rate);
  std::vector<Real> mask(x.numel());
  for (Real& m : mask) m = rng.uniform() >= static_cast<double>(rate) ? keep_scale : Real{0};
  std::vector<Real> out(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[i] * mask[i];
  return make_result(x.shape(), std::move(out), {x},
                     [x, mask = std::move(mask)](const detail::Node& self) {
    auto gx = grad_of(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * mask[i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) throw ShapeMismatch("reshape", x.shape(), shape);
  std::vector<Real> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [x](const detail::Node& self) {
    auto gx = grad_of(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const Shape& s = x.shape();
  const std::size_t r = s.size();
  std::vector<bool> seen(r, false);
  if (order.size() != r) throw ShapeMismatch("permute", s, order);
  for (std::size_t o : order) {
    if (o >= r || seen[o]) throw ShapeMismatch("permute", s, order);
    seen[o] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = s[order[i]];

  // gather[i] = input offset feeding output element i
  std::vector<std::size_t> gather(x.numel());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t lin = 0; lin < gather.size(); ++lin) {
    std::size_t off = 0;
    for (std::size_t a = 0; a < r; ++a) off += idx[a] * in_stride[order[a]];
    gather[lin] = off;
    for (std::size_t a = r; a-- > 0;) {
      if (++idx[a] < out_shape[a]) break;
      idx[a] = 0;
    }
  }
  std::vector<Real> out(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[gather[i]];
  return make_result(std::move(out_shape), std::move(out), {x},
                     [x, gather = std::move(gather)](const detail::Node& self) {
    auto gx = grad_of(x);
    for (std::size_t i = 0; i < gather.size(); ++i) gx[gather[i]] += self.grad[i];
  });
}

Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = x.shape();
  if (axis >= s.size() || length == 0 || start + length > s[axis]) {
    throw ShapeMismatch("narrow", s, {axis, start, length});
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape out_shape = s;
  out_shape[axis] = length;
  std::vector<Real> out(outer * length * inner);
  const auto xs = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xs.data() + (o * n + start) * inner, length * inner,
                out.data() + o * length * inner);
  return make_result(std::move(out_shape), std::move(out), {x},
                     [x, outer, inner, n, start, length](const detail::Node& self) {
    auto gx = grad_of(x);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < length * inner; ++i)
        gx[(o * n + start) * inner + i] += self.grad[o * length * inner + i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw EmptyList("concat of zero tensors");
  const Shape& s0 = parts.front().shape();
  if (axis >= s0.size()) throw ShapeMismatch("concat axis", s0, {axis});
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::size_t total = 0;
  std::vector<std::size_t> extents;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw ShapeMismatch("concat", s0, s);
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i]) throw ShapeMismatch("concat", s0, s);
    extents.push_back(s[axis]);
    total += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = total;
  std::vector<Real> out(outer * total * inner);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto ps = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(ps.data() + o * extents[k] * inner, extents[k] * inner,
                  out.data() + (o * total + offset) * inner);
    offset += extents[k];
  }
  return make_result(std::move(out_shape), std::move(out), parts,
                     [parts, extents, outer, inner, total](const detail::Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (parts[k].requires_grad()) {
        auto gp = grad_of(parts[k]);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < extents[k] * inner; ++i)
            gp[o * extents[k] * inner + i] += self.grad[(o * total + offset) * inner + i];
      }
      offset += extents[k];
    }
  });
}

Tensor index_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.rank() == 0 || rows.empty()) throw ShapeMismatch("index_rows", x.shape(), {rows.size()});
  const std::size_t stride = x.numel() / x.dim(0);
  for (std::size_t r : rows)
    if (r >= x.dim(0)) throw ShapeMismatch("index_rows", x.shape(), {r});
  Shape out_shape = x.shape();
  out_shape[0] = rows.size();
  std::vector<Real> out(rows.size() * stride);
  const auto xs = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(xs.data() + rows[i] * stride, stride, out.data() + i * stride);
  std::vector<std::size_t> picked(rows.begin(), rows.end());
  return make_result(std::move(out_shape), std::move(out), {x},
                     [x, stride, picked = std::move(picked)](const detail::Node& self) {
    auto gx = grad_of(x);
    for (std::size_t i = 0; i < picked.size(); ++i)
      for (std::size_t j = 0; j < stride; ++j)
        gx[picked[i] * stride + j] += self.grad[i * stride + j];
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw ShapeMismatch("cross_entropy", logits.shape(), {targets.size()});
  }
  const std::size_t n = logits.dim(0);
  const std::size_t k = logits.dim(1);
  std::vector<Real> probs(n * k);
  const auto ls = logits.data();
  Real total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= k) throw ShapeMismatch("cross_entropy target", logits.shape(), {targets[i]});
    const Real* row = ls.data() + i * k;
    const Real mx = *std::max_element(row, row + k);
    Real z = 0;
    for (std::size_t j = 0; j < k; ++j) {
      probs[i * k + j] = std::exp(row[j] - mx);
      z += probs[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= z;
    total += -(row[targets[i]] - mx - std::log(z));
  }
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return make_result({}, {total / static_cast<Real>(n)}, {logits},
                     [logits, n, k, probs = std::move(probs),
                      tgt = std::move(tgt)](const detail::Node& self) {
    auto gl = grad_of(logits);
    const Real g = self.grad[0] / static_cast<Real>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j)
        gl[i * k + j] += g * (probs[i * k + j] - (j == tgt[i] ? Real{1} : Real{0}));
  });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  if (x.rank() != 3 || weight.rank() != 4 || weight.dim(1) != x.dim(0) ||
      weight.dim(2) != weight.dim(3)) {
    throw ShapeMismatch("conv2d", x.shape(), weight.shape());
  }
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  if (bias.numel() != cout) throw ShapeMismatch("conv2d bias", weight.shape(), bias.shape());
  if (stride == 0 || h + 2 * padding < k || w + 2 * padding < k) {
    throw ShapeMismatch("conv2d geometry", x.shape(), weight.shape());
  }
  const std::size_t ho = (h + 2 * padding - k) / stride + 1;
  const std::size_t wo = (w + 2 * padding - k) / stride + 1;
  const std::size_t patch = cin * k * k;
  const std::size_t positions = ho * wo;

  // src[p * positions + q] = flat input index read by patch row p at output q
  std::vector<std::size_t> src(patch * positions);
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const std::size_t p = (c * k + ky) * k + kx;
        for (std::size_t oy = 0; oy < ho; ++oy)
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                            static_cast<std::ptrdiff_t>(padding);
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                            static_cast<std::ptrdiff_t>(padding);
            const std::size_t cy = static_cast<std::size_t>(
                std::clamp<std::ptrdiff_t>(iy, 0, static_cast<std::ptrdiff_t>(h) - 1));
            const std::size_t cx = static_cast<std::size_t>(
                std::clamp<std::ptrdiff_t>(ix, 0, static_cast<std::ptrdiff_t>(w) - 1));
            src[p * positions + oy * wo + ox] = (c * h + cy) * w + cx;
          }
      }
  const auto xs = x.data();
  std::vector<Real> cols(patch * positions);
  for (std::size_t i = 0; i < cols.size(); ++i) cols[i] = xs[src[i]];

  std::vector<Real> out(cout * positions);
  const auto ws = weight.data();
  const auto bs = bias.data();
  for (std::size_t o = 0; o < cout; ++o) {
    Real* po = out.data() + o * positions;
    std::fill_n(po, positions, bs[o]);
    for (std::size_t p = 0; p < patch; ++p) {
      const Real wv = ws[o * patch + p];
      const Real* pc = cols.data() + p * positions;
      for (std::size_t q = 0; q < positions; ++q) po[q] += wv * pc[q];
    }
  }
  return make_result({cout, ho, wo}, std::move(out), {x, weight, bias},
                     [x, weight, bias, cout, patch, positions, src = std::move(src),
                      cols = std::move(cols)](const detail::Node& self) {
    const Real* go = self.grad.data();
    if (weight.requires_grad()) {
      auto gw = grad_of(weight);
      for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t p = 0; p < patch; ++p) {
          Real acc = 0;
          const Real* pc = cols.data() + p * positions;
          const Real* pg = go + o * positions;
          for (std::size_t q = 0; q < positions; ++q) acc += pg[q] * pc[q];
          gw[o * patch + p] += acc;
        }
    }
    if (bias.requires_grad()) {
      auto gb = grad_of(bias);
      for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t q = 0; q < positions; ++q) gb[o] += go[o * positions + q];
    }
    if (x.requires_grad()) {
      auto gx = grad_of(x);
      const auto ws = weight.data();
      std::vector<Real> gcols(patch * positions, Real{0});
      for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t p = 0; p < patch; ++p) {
          const Real wv = ws[o * patch + p];
          Real* pgc = gcols.data() + p * positions;
          const Real* pg = go + o * positions;
          for (std::size_t q = 0; q < positions; ++q) pgc[q] += wv * pg[q];
        }
      for (std::size_t i = 0; i < gcols.size(); ++i) gx[src[i]] += gcols[i];
    }
  });
}

}  // namespace demf
