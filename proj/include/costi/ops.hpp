#pragma once

// Differentiable primitives over costi::Tensor.
//
// Broadcasting follows the trailing-dimension rule: shapes are right-aligned,
// missing leading dimensions count as 1, and a size-1 axis stretches to match
// the other operand. Any other mismatch is a ShapeError naming both shapes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>


#include "costi/rng.hpp"
#include "costi/tensor.hpp"

namespace costi {

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + to_string(a) + " and " + to_string(b) + " are not broadcastable");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

namespace detail {

/// Strides of `in` viewed at the rank of `out`, with 0 on stretched axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;
    const std::size_t o = out.size() - 1 - k;
    strides[o] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

/// Calls f(out_index, a_index, b_index) for every element of `out`.
/// True when `small` (leading 1s ignored) equals the trailing dimensions of `out`.
inline bool is_trailing_shape(const Shape& small, const Shape& out) {
  std::size_t lead = 0;
  while (lead < small.size() && small[lead] == 1) ++lead;
  const std::size_t rank = small.size() - lead;
  if (rank > out.size()) return false;
  return std::equal(small.begin() + static_cast<std::ptrdiff_t>(lead), small.end(),
                    out.end() - static_cast<std::ptrdiff_t>(rank));
}

template <typename F>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  const std::size_t n = shape_numel(out);
  if (a == out && b == out) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  if (a == out && is_trailing_shape(b, out)) {
    const std::size_t nb = shape_numel(b);
    for (std::size_t o = 0; o < n; o += nb)
      for (std::size_t j = 0; j < nb; ++j) f(o + j, o + j, j);
    return;
  }
  if (b == out && is_trailing_shape(a, out)) {
    const std::size_t na = shape_numel(a);
    for (std::size_t o = 0; o < n; o += na)
      for (std::size_t j = 0; j < na; ++j) f(o + j, j, o + j);
    return;
  }
  if (out.empty()) {
    f(0, 0, 0);
    return;
  }
  const auto sa = broadcast_strides(a, out);
  const auto sb = broadcast_strides(b, out);
  const std::size_t rank = out.size();
  const std::size_t inner = out[rank - 1];
  const std::size_t ia_step = sa[rank - 1];
  const std::size_t ib_step = sb[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t base_a = 0, base_b = 0;
  for (std::size_t o = 0; o < n; o += inner) {
    std::size_t ia = base_a, ib = base_b;
    for (std::size_t j = 0; j < inner; ++j, ia += ia_step, ib += ib_step) f(o + j, ia, ib);
    // advance the outer multi-index
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      base_a += sa[d];
      base_b += sb[d];
      if (idx[d] < out[d]) break;
      base_a -= sa[d] * out[d];
      base_b -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Bwd bwd) {
  Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  std::vector<T> out(shape_numel(out_shape));
  const auto ad = a.data();
  const auto bd = b.data();
  for_each_broadcast(out_shape, a.shape(), b.shape(),
                     [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = fwd(ad[ia], bd[ib]); });
  return make_result<T>(std::move(out_shape), std::move(out), {&a, &b}, [bwd](Node<T>& self) {
    auto* pa = grad_target(self, 0);
    auto* pb = grad_target(self, 1);
    const auto& av = self.parents[0]->data;
    const auto& bv = self.parents[1]->data;
    for_each_broadcast(self.shape, self.parents[0]->shape, self.parents[1]->shape,
                       [&](std::size_t o, std::size_t ia, std::size_t ib) {
                         T ga = 0, gb = 0;
                         bwd(self.grad[o], av[ia], bv[ib], self.data[o], ga, gb);
                         if (pa) pa->grad[ia] += ga;
                         if (pb) pb->grad[ib] += gb;
                       });
  });
}

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_op(const Tensor<T>& x, Fwd fwd, Bwd bwd) {
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
  return make_result<T>(x.shape(), std::move(out), {&x}, [bwd](Node<T>& self) {
    auto* px = grad_target(self, 0);
    if (!px) return;
    const auto& xv = self.parents[0]->data;
    for (std::size_t i = 0; i < xv.size(); ++i) px->grad[i] += bwd(self.grad[i], xv[i], self.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x + y; },
      [](T g, T, T, T, T& ga, T& gb) {
        ga = g;
        gb = g;
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x - y; },
      [](T g, T, T, T, T& ga, T& gb) {
        ga = g;
        gb = -g;
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x * y; },
      [](T g, T x, T y, T, T& ga, T& gb) {
        ga = g * y;
        gb = g * x;
      });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x / y; },
      [](T g, T, T y, T out, T& ga, T& gb) {
        ga = g / y;
        gb = -g * out / y;
      });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return detail::unary_op(x, [](T v) { return -v; }, [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary_op(x, [](T v) { return std::exp(v); }, [](T g, T, T y) { return g * y; });
}

/// Natural logarithm; negative inputs are a DomainError.
template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  for (auto v : x.data()) {
    if (v < T(0)) throw DomainError("log of negative value " + std::to_string(v));
  }
  return detail::unary_op(x, [](T v) { return std::log(v); }, [](T g, T v, T) { return g / v; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  for (auto v : x.data()) {
    if (v < T(0)) throw DomainError("sqrt of negative value " + std::to_string(v));
  }
  return detail::unary_op(x, [](T v) { return std::sqrt(v); },
                          [](T g, T, T y) { return g / (T(2) * y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary_op(x, [](T v) { return v > T(0) ? v : T(0); },
                          [](T g, T v, T) { return v > T(0) ? g : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary_op(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T g, T, T y) { return g * y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary_op(x, [](T v) { return std::tanh(v); },
                          [](T g, T, T y) { return g * (T(1) - y * y); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary_op(x, [](T v) { return v * v; }, [](T g, T v, T) { return T(2) * g * v; });
}

/// x * sigmoid(x)
template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary_op(
      x,
      [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T g, T v, T) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return g * s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return detail::unary_op(x, [factor](T v) { return v * factor; },
                          [factor](T g, T, T) { return g * factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
  return detail::unary_op(x, [offset](T v) { return v + offset; }, [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, T s) { return scale(a, s); }
template <typename T>
Tensor<T> operator*(T s, const Tensor<T>& a) { return scale(a, s); }
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, T s) { return add_scalar(a, s); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, T s) { return add_scalar(a, -s); }

// ---------------------------------------------------------------------------
// Gradient control
// ---------------------------------------------------------------------------

/// Same values, detached from the tape: no gradient flows through the result.
template <typename T>
Tensor<T> stopgrad(const Tensor<T>& x) {
  return Tensor<T>(x.shape(), x.to_vector(), false);
}

/// Inverted dropout: at train time keeps each element with probability 1-p and
/// rescales it by 1/(1-p); identity when `training` is false or p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) return scale(x, T(0));
  const T keep_scale = T(1.0 / (1.0 - p));
  // two 32-bit decisions per engine draw
  const auto threshold = static_cast<std::uint64_t>(p * 4294967296.0);
  std::vector<T> mask(x.numel());
  for (std::size_t i = 0; i < mask.size(); i += 2) {
    const std::uint64_t r = rng.next_u64();
    mask[i] = (r & 0xFFFFFFFFu) < threshold ? T(0) : keep_scale;
    if (i + 1 < mask.size()) mask[i + 1] = (r >> 32) < threshold ? T(0) : keep_scale;
  }
  return mul(x, Tensor<T>(x.shape(), std::move(mask)));
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

/// Sum of all elements (rank-0 result).
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (auto v : x.data()) total += v;
  return detail::make_result<T>(Shape{}, {total}, {&x}, [](detail::Node<T>& self) {
    auto* px = detail::grad_target(self, 0);
    if (!px) return;
    for (auto& g : px->grad) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Sum along `axis`; the axis is removed unless keepdim.
template <typename T>
Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdim = false) {
  const std::size_t ax = normalize_axis(axis, x.dim());
  const auto s = detail::split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  std::vector<T> out(s.outer * s.inner, T(0));
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k) {
      const T* src = xd.data() + (o * s.n + k) * s.inner;
      T* dst = out.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  return detail::make_result<T>(std::move(out_shape), std::move(out), {&x}, [s](detail::Node<T>& self) {
    auto* px = detail::grad_target(self, 0);
    if (!px) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.n; ++k) {
        T* dst = px->grad.data() + (o * s.n + k) * s.inner;
        const T* g = self.grad.data() + o * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) dst[i] += g[i];
      }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdim = false) {
  const std::size_t n = x.size(axis);
  return scale(sum(x, axis, keepdim), T(1) / static_cast<T>(n));
}

/// Maximum along `axis`. The gradient flows to the first index attaining the
/// maximum (ties resolve to the lowest index).
template <typename T>
Tensor<T> max(const Tensor<T>& x, int axis, bool keepdim = false) {
  const std::size_t ax = normalize_axis(axis, x.dim());
  const auto s = detail::split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  std::vector<T> out(s.outer * s.inner);
  std::vector<std::size_t> arg(s.outer * s.inner, 0);
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = 0;
      T bv = xd[o * s.n * s.inner + i];
      for (std::size_t k = 1; k < s.n; ++k) {
        const T v = xd[(o * s.n + k) * s.inner + i];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      out[o * s.inner + i] = bv;
      arg[o * s.inner + i] = best;
    }
  return detail::make_result<T>(std::move(out_shape), std::move(out), {&x},
                                [s, arg = std::move(arg)](detail::Node<T>& self) {
                                  auto* px = detail::grad_target(self, 0);
                                  if (!px) return;
                                  for (std::size_t o = 0; o < s.outer; ++o)
                                    for (std::size_t i = 0; i < s.inner; ++i) {
                                      const std::size_t j = o * s.inner + i;
                                      px->grad[(o * s.n + arg[j]) * s.inner + i] += self.grad[j];
                                    }
                                });
}

/// Maximum over all elements (first occurrence on ties).
template <typename T>
Tensor<T> max(const Tensor<T>& x) {
  std::size_t best = 0;
  const auto xd = x.data();
  for (std::size_t i = 1; i < xd.size(); ++i)
    if (xd[i] > xd[best]) best = i;
  return detail::make_result<T>(Shape{}, {xd[best]}, {&x}, [best](detail::Node<T>& self) {
    auto* px = detail::grad_target(self, 0);
    if (px) px->grad[best] += self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Softmax and normalization
// ---------------------------------------------------------------------------

/// Softmax along `axis`, stabilized by subtracting the running maximum.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  const std::size_t ax = normalize_axis(axis, x.dim());
  const auto s = detail::split_at(x.shape(), ax);
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      T m = xd[base];
      for (std::size_t k = 1; k < s.n; ++k) m = std::max(m, xd[base + k * s.inner]);
      T z = 0;
      for (std::size_t k = 0; k < s.n; ++k) {
        const T e = std::exp(xd[base + k * s.inner] - m);
        out[base + k * s.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < s.n; ++k) out[base + k * s.inner] /= z;
    }
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [s](detail::Node<T>& self) {
    auto* px = detail::grad_target(self, 0);
    if (!px) return;
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.n * s.inner + i;
        T dot = 0;
        for (std::size_t k = 0; k < s.n; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
        for (std::size_t k = 0; k < s.n; ++k) {
          const std::size_t j = base + k * s.inner;
          px->grad[j] += y[j] * (g[j] - dot);
        }
      }
  });
}

/// Layer normalization along `axis`. `gain` and `bias` are optional
/// (undefined tensors skip the affine part) and have shape [size(axis)].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, int axis = -1,
                     double eps = 1e-5) {
  const std::size_t ax = normalize_axis(axis, x.dim());
  const auto s = detail::split_at(x.shape(), ax);
  const bool affine = gain.defined();
  if (affine && (gain.numel() != s.n || !bias.defined() || bias.numel() != s.n)) {
    throw ShapeError("layer_norm: gain/bias must have " + std::to_string(s.n) + " elements");
  }
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  std::vector<T> xhat(xd.size());
  std::vector<T> inv_std(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      T mu = 0;
      for (std::size_t k = 0; k < s.n; ++k) mu += xd[base + k * s.inner];
      mu /= static_cast<T>(s.n);
      T var = 0;
      for (std::size_t k = 0; k < s.n; ++k) {
        const T d = xd[base + k * s.inner] - mu;
        var += d * d;
      }
      var /= static_cast<T>(s.n);
      const T r = T(1) / std::sqrt(var + static_cast<T>(eps));
      inv_std[o * s.inner + i] = r;
      for (std::size_t k = 0; k < s.n; ++k) {
        const std::size_t j = base + k * s.inner;
        xhat[j] = (xd[j] - mu) * r;
        out[j] = affine ? xhat[j] * gain[k] + bias[k] : xhat[j];
      }
    }
  auto bw = [s, affine, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
    auto* px = detail::grad_target(self, 0);
    detail::Node<T>* pg = affine ? detail::grad_target(self, 1) : nullptr;
    detail::Node<T>* pb = affine ? detail::grad_target(self, 2) : nullptr;
    const T* gain_v = affine ? self.parents[1]->data.data() : nullptr;
    const auto& g = self.grad;
    const T inv_n = T(1) / static_cast<T>(s.n);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.n * s.inner + i;
        T sum_g = 0, sum_gx = 0;
        for (std::size_t k = 0; k < s.n; ++k) {
          const std::size_t j = base + k * s.inner;
          const T gh = affine ? g[j] * gain_v[k] : g[j];
          sum_g += gh;
          sum_gx += gh * xhat[j];
          if (pg) pg->grad[k] += g[j] * xhat[j];
          if (pb) pb->grad[k] += g[j];
        }
        if (!px) continue;
        const T r = inv_std[o * s.inner + i];
        for (std::size_t k = 0; k < s.n; ++k) {
          const std::size_t j = base + k * s.inner;
          const T gh = affine ? g[j] * gain_v[k] : g[j];
          px->grad[j] += r * (gh - inv_n * sum_g - xhat[j] * inv_n * sum_gx);
        }
      }
  };
  if (affine) return detail::make_result<T>(x.shape(), std::move(out), {&x, &gain, &bias}, std::move(bw));
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, std::move(bw));
}

// ---------------------------------------------------------------------------
// Matrix product
// ---------------------------------------------------------------------------

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// dA[m,k] += dC[m,n] * B[k,n]^T
template <typename T>
void gemm_nt(const T* dc, const T* b, T* da, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<T> bt(k * n);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  gemm_nn(dc, bt.data(), da, m, n, k);
}

// dB[k,n] += A[m,k]^T * dC[m,n]
template <typename T>
void gemm_tn(const T* a, const T* dc, T* db, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* grow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      T* drow = db + p * n;
      for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
    }
  }
}

}  // namespace detail

/// Batched matrix product [.., m, k] x [.., k, n] -> [.., m, n] with
/// broadcasting over the leading (batch) dimensions.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dim() < 2 || b.dim() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const std::size_t m = a.shape()[a.dim() - 2], k = a.shape()[a.dim() - 1];
  const std::size_t k2 = b.shape()[b.dim() - 2], n = b.shape()[b.dim() - 1];
  if (k != k2) {
    throw ShapeError("matmul inner dimensions differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  // Rank-2 right operand: fold every leading dimension of `a` into the rows.
  if (b.dim() == 2) {
    const std::size_t rows = a.numel() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<T> out(rows * n, T(0));
    detail::gemm_nn(a.data().data(), b.data().data(), out.data(), rows, k, n);
    return detail::make_result<T>(std::move(out_shape), std::move(out), {&a, &b},
                                  [rows, k, n](detail::Node<T>& self) {
                                    auto* pa = detail::grad_target(self, 0);
                                    auto* pb = detail::grad_target(self, 1);
                                    const auto& av = self.parents[0]->data;
                                    const auto& bv = self.parents[1]->data;
                                    if (pa) detail::gemm_nt(self.grad.data(), bv.data(), pa->grad.data(), rows, k, n);
                                    if (pb) detail::gemm_tn(av.data(), self.grad.data(), pb->grad.data(), rows, k, n);
                                  });
  }
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Shape batch = broadcast_shapes(batch_a, batch_b);
  const std::size_t nb = shape_numel(batch);
  // Per-batch element offsets into a and b.
  std::vector<std::size_t> off_a(nb), off_b(nb);
  detail::for_each_broadcast(batch, batch_a, batch_b, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    off_a[o] = ia * m * k;
    off_b[o] = ib * k * n;
  });
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(nb * m * n, T(0));
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (std::size_t t = 0; t < nb; ++t) detail::gemm_nn(ad + off_a[t], bd + off_b[t], out.data() + t * m * n, m, k, n);
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {&a, &b},
      [m, k, n, nb, off_a = std::move(off_a), off_b = std::move(off_b)](detail::Node<T>& self) {
        auto* pa = detail::grad_target(self, 0);
        auto* pb = detail::grad_target(self, 1);
        const auto& av = self.parents[0]->data;
        const auto& bv = self.parents[1]->data;
        for (std::size_t t = 0; t < nb; ++t) {
          const T* g = self.grad.data() + t * m * n;
          if (pa) detail::gemm_nt(g, bv.data() + off_b[t], pa->grad.data() + off_a[t], m, k, n);
          if (pb) detail::gemm_tn(av.data() + off_a[t], g, pb->grad.data() + off_b[t], m, k, n);
        }
      });
}

// ---------------------------------------------------------------------------
// Layout (all copies; storage is always dense row-major)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  return detail::make_result<T>(std::move(shape), x.to_vector(), {&x}, [](detail::Node<T>& self) {
    auto* px = detail::grad_target(self, 0);
    if (!px) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
  });
}

/// Output axis i is input axis perm[i].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t rank = x.dim();
  if (perm.size() != rank) throw ShapeError("permute: permutation rank mismatch for " + to_string(x.shape()));
  std::vector<bool> seen(rank, false);
  for (auto p : perm) {
    if (p >= rank || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  const Shape& in = x.shape();
  Shape out_shape(rank);
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t d = rank; d-- > 1;) in_strides[d - 1] = in_strides[d] * in[d];
  std::vector<std::size_t> src_stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in[perm[i]];
    src_stride[i] = in_strides[perm[i]];
  }
  const std::size_t n = x.numel();
  // map[o] = input flat index feeding output flat index o
  std::vector<std::size_t> map(n);
  {
    std::vector<std::size_t> idx(rank, 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < n; ++o) {
      map[o] = src;
      for (std::size_t d = rank; d-- > 0;) {
        ++idx[d];
        src += src_stride[d];
        if (idx[d] < out_shape[d]) break;
        src -= src_stride[d] * out_shape[d];
        idx[d] = 0;
      }
    }
  }
  std::vector<T> out(n);
  const auto xd = x.data();
  for (std::size_t o = 0; o < n; ++o) out[o] = xd[map[o]];
  return detail::make_result<T>(std::move(out_shape), std::move(out), {&x},
                                [map = std::move(map)](detail::Node<T>& self) {
                                  auto* px = detail::grad_target(self, 0);
                                  if (!px) return;
                                  for (std::size_t o = 0; o < map.size(); ++o) px->grad[map[o]] += self.grad[o];
                                });
}

/// Swaps two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int a0, int a1) {
  std::vector<std::size_t> perm(x.dim());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[normalize_axis(a0, x.dim())], perm[normalize_axis(a1, x.dim())]);
  return permute(x, perm);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of an empty list");
  const std::size_t ax = normalize_axis(axis, parts[0].dim());
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    probe[ax] = 0;
    if (probe != out_shape) {
      throw ShapeError("concat: incompatible shapes " + to_string(parts[0].shape()) + " and " + to_string(p.shape()));
    }
  }
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    widths.push_back(p.shape()[ax]);
    out_shape[ax] += p.shape()[ax];
  }
  const auto s = detail::split_at(out_shape, ax);
  std::vector<T> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t q = 0; q < parts.size(); ++q) {
    const auto pd = parts[q].data();
    const std::size_t w = widths[q] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(pd.data() + o * w, w, out.data() + o * s.n * s.inner + offset);
    offset += w;
  }
  return detail::make_result<T>(std::move(out_shape), std::move(out), parts,
                                [s, widths](detail::Node<T>& self) {
                                  std::size_t offset = 0;
                                  for (std::size_t q = 0; q < widths.size(); ++q) {
                                    const std::size_t w = widths[q] * s.inner;
                                    if (auto* p = detail::grad_target(self, q)) {
                                      for (std::size_t o = 0; o < s.outer; ++o) {
                                        const T* g = self.grad.data() + o * s.n * s.inner + offset;
                                        T* dst = p->grad.data() + o * w;
                                        for (std::size_t i = 0; i < w; ++i) dst[i] += g[i];
                                      }
                                    }
                                    offset += w;
                                  }
                                });
}

/// Elements [start, start+length) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, x.dim());
  const auto s = detail::split_at(x.shape(), ax);
  if (length == 0 || start + length > s.n) {
    throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + length) +
                     ") out of range for axis of size " + std::to_string(s.n));
  }
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  std::vector<T> out(s.outer * length * s.inner);
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xd.data() + (o * s.n + start) * s.inner, length * s.inner, out.data() + o * length * s.inner);
  return detail::make_result<T>(std::move(out_shape), std::move(out), {&x},
                                [s, start, length](detail::Node<T>& self) {
                                  auto* px = detail::grad_target(self, 0);
                                  if (!px) return;
                                  for (std::size_t o = 0; o < s.outer; ++o) {
                                    const T* g = self.grad.data() + o * length * s.inner;
                                    T* dst = px->grad.data() + (o * s.n + start) * s.inner;
                                    for (std::size_t i = 0; i < length * s.inner; ++i) dst[i] += g[i];
                                  }
                                });
}

/// Right-pads `axis` with zeros up to `new_size`.
template <typename T>
Tensor<T> pad(const Tensor<T>& x, int axis, std::size_t new_size) {
  const std::size_t ax = normalize_axis(axis, x.dim());
  const std::size_t cur = x.shape()[ax];
  if (new_size < cur) throw ShapeError("pad: target size smaller than current size");
  if (new_size == cur) return x;
  Shape zshape = x.shape();
  zshape[ax] = new_size - cur;
  return concat<T>({x, Tensor<T>::zeros(zshape)}, static_cast<int>(ax));
}

/// Repeats every element `factor` times along `axis` (nearest-neighbour expansion).
template <typename T>
Tensor<T> repeat_interleave(const Tensor<T>& x, int axis, std::size_t factor) {
  const std::size_t ax = normalize_axis(axis, x.dim());
  if (factor == 1) return x;
  const auto s = detail::split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] *= factor;
  std::vector<T> out(x.numel() * factor);
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k)
      for (std::size_t r = 0; r < factor; ++r)
        std::copy_n(xd.data() + (o * s.n + k) * s.inner, s.inner,
                    out.data() + ((o * s.n + k) * factor + r) * s.inner);
  return detail::make_result<T>(std::move(out_shape), std::move(out), {&x}, [s, factor](detail::Node<T>& self) {
    auto* px = detail::grad_target(self, 0);
    if (!px) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.n; ++k)
        for (std::size_t r = 0; r < factor; ++r) {
          const T* g = self.grad.data() + ((o * s.n + k) * factor + r) * s.inner;
          T* dst = px->grad.data() + (o * s.n + k) * s.inner;
          for (std::size_t i = 0; i < s.inner; ++i) dst[i] += g[i];
        }
  });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Multi-head scaled dot-product attention along axis 1 of rank-4 operands.
/// q is [A, S, I, d]; k and v are [A, Sk, I, d]. The feature axis is split into
/// `heads` contiguous groups of size dh = d / heads and, for every (a, i, head),
///   out[a, s, i, :] = sum_t softmax_t(q[a, s, i, :] . k[a, t, i, :] / sqrt(dh)) v[a, t, i, :].
/// Equivalent to projecting per head, softmax(Q K^T / sqrt(dh)) V, and merging heads.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads) {
  if (q.dim() != 4 || k.dim() != 4 || v.dim() != 4)
    throw ShapeError("attention needs rank-4 operands, got " + to_string(q.shape()) + ", " + to_string(k.shape()) +
                     ", " + to_string(v.shape()));
  const std::size_t A = q.size(0), S = q.size(1), I = q.size(2), d = q.size(3), Sk = k.size(1);
  if (k.shape() != v.shape() || k.size(0) != A || k.size(2) != I || k.size(3) != d)
    throw ShapeError("attention: key/value shapes " + to_string(k.shape()) + " / " + to_string(v.shape()) +
                     " incompatible with query " + to_string(q.shape()));
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: feature size not divisible by heads");
  const std::size_t dh = d / heads;
  const T scale_factor = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const T* qd = q.data().data();
  const T* kd = k.data().data();
  const T* vd = v.data().data();
  std::vector<T> out(q.numel(), T(0));
  std::vector<T> probs(A * I * heads * S * Sk);
  auto qi = [=](std::size_t a, std::size_t s, std::size_t i) { return ((a * S + s) * I + i) * d; };
  auto ki = [=](std::size_t a, std::size_t t, std::size_t i) { return ((a * Sk + t) * I + i) * d; };
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t i = 0; i < I; ++i)
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t s = 0; s < S; ++s) {
          T* p = probs.data() + (((a * I + i) * heads + h) * S + s) * Sk;
          const T* qrow = qd + qi(a, s, i) + off;
          T m = -std::numeric_limits<T>::infinity();
          for (std::size_t t = 0; t < Sk; ++t) {
            const T* krow = kd + ki(a, t, i) + off;
            T dot = 0;
            for (std::size_t c = 0; c < dh; ++c) dot += qrow[c] * krow[c];
            p[t] = dot * scale_factor;
            m = std::max(m, p[t]);
          }
          T z = 0;
          for (std::size_t t = 0; t < Sk; ++t) {
            p[t] = std::exp(p[t] - m);
            z += p[t];
          }
          const T inv = T(1) / z;
          T* orow = out.data() + qi(a, s, i) + off;
          for (std::size_t t = 0; t < Sk; ++t) {
            p[t] *= inv;
            const T* vrow = vd + ki(a, t, i) + off;
            for (std::size_t c = 0; c < dh; ++c) orow[c] += p[t] * vrow[c];
          }
        }
      }
  return detail::make_result<T>(
      q.shape(), std::move(out), {&q, &k, &v},
      [=, probs = std::move(probs)](detail::Node<T>& self) {
        auto* pq = detail::grad_target(self, 0);
        auto* pk = detail::grad_target(self, 1);
        auto* pv = detail::grad_target(self, 2);
        const T* qv = self.parents[0]->data.data();
        const T* kv = self.parents[1]->data.data();
        const T* vv = self.parents[2]->data.data();
        const T* g = self.grad.data();
        std::vector<T> dp(Sk);
        for (std::size_t a = 0; a < A; ++a)
          for (std::size_t i = 0; i < I; ++i)
            for (std::size_t h = 0; h < heads; ++h) {
              const std::size_t off = h * dh;
              for (std::size_t s = 0; s < S; ++s) {
                const T* p = probs.data() + (((a * I + i) * heads + h) * S + s) * Sk;
                const T* grow = g + qi(a, s, i) + off;
                T dot = 0;
                for (std::size_t t = 0; t < Sk; ++t) {
                  const T* vrow = vv + ki(a, t, i) + off;
                  T acc = 0;
                  for (std::size_t c = 0; c < dh; ++c) acc += grow[c] * vrow[c];
                  dp[t] = acc;
                  dot += acc * p[t];
                  if (pv) {
                    T* dv = pv->grad.data() + ki(a, t, i) + off;
                    for (std::size_t c = 0; c < dh; ++c) dv[c] += p[t] * grow[c];
                  }
                }
                if (!pq && !pk) continue;
                const T* qrow = qv + qi(a, s, i) + off;
                T* dq = pq ? pq->grad.data() + qi(a, s, i) + off : nullptr;
                for (std::size_t t = 0; t < Sk; ++t) {
                  const T ds = p[t] * (dp[t] - dot) * scale_factor;
                  const T* krow = kv + ki(a, t, i) + off;
                  if (dq)
                    for (std::size_t c = 0; c < dh; ++c) dq[c] += ds * krow[c];
                  if (pk) {
                    T* dk = pk->grad.data() + ki(a, t, i) + off;
                    for (std::size_t c = 0; c < dh; ++c) dk[c] += ds * qrow[c];
                  }
                }
              }
            }
      });
}

// ---------------------------------------------------------------------------
// Recurrent scan
// ---------------------------------------------------------------------------

/// Exponential moving-average scan over axis -2 of x [.., L, C]:
///   h_t = a * h_{t-1} + (1 - a) * x_t,  h_{-1} = 0,
/// with a per-channel decay a [C] in (0, 1). `reverse` scans from t = L-1 down.
template <typename T>
Tensor<T> ema_scan(const Tensor<T>& x, const Tensor<T>& decay, bool reverse) {
  if (x.dim() < 2) throw ShapeError("ema_scan needs rank >= 2, got " + to_string(x.shape()));
  const std::size_t len = x.shape()[x.dim() - 2];
  const std::size_t ch = x.shape()[x.dim() - 1];
  if (decay.numel() != ch) throw ShapeError("ema_scan: decay must have " + std::to_string(ch) + " elements");
  const std::size_t outer = x.numel() / (len * ch);
  const auto xd = x.data();
  const auto ad = decay.data();
  std::vector<T> out(xd.size());
  auto at = [len, ch, reverse](std::size_t o, std::size_t step, std::size_t c) {
    const std::size_t t = reverse ? len - 1 - step : step;
    return (o * len + t) * ch + c;
  };
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < ch; ++c) {
      T h = 0;
      for (std::size_t step = 0; step < len; ++step) {
        const std::size_t j = at(o, step, c);
        h = ad[c] * h + (T(1) - ad[c]) * xd[j];
        out[j] = h;
      }
    }
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &decay},
                                [outer, len, ch, at](detail::Node<T>& self) {
                                  auto* px = detail::grad_target(self, 0);
                                  auto* pa = detail::grad_target(self, 1);
                                  const auto& xv = self.parents[0]->data;
                                  const auto& av = self.parents[1]->data;
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t c = 0; c < ch; ++c) {
                                      T carry = 0;  // dL/dh_t accumulated from later steps
                                      for (std::size_t step = len; step-- > 0;) {
                                        const std::size_t j = at(o, step, c);
                                        const T gh = self.grad[j] + carry;
                                        if (px) px->grad[j] += (T(1) - av[c]) * gh;
                                        const T prev = step > 0 ? self.data[at(o, step - 1, c)] : T(0);
                                        if (pa) pa->grad[c] += gh * (prev - xv[j]);
                                        carry = av[c] * gh;
                                      }
                                    }
                                });
}

}  // namespace costi
