#pragma once
// Differentiable tensor operations. Every op validates shapes up front,
// computes the forward result, and (when a tape is active and an input
// tracks gradient) records a backward closure capturing the shared storage
// of its operands. Reductions accumulate in double regardless of S.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "catnet/tensor.hpp"

namespace catnet {

namespace detail {

template <typename S>
bool tracks(const std::shared_ptr<TensorDataT<S>>& d) {
  return d->requires_grad || d->tracked;
}

template <typename S>
bool should_record(std::initializer_list<const TensorT<S>*> ins) {
  if (TapeT<S>::current() == nullptr) return false;
  for (const TensorT<S>* t : ins)
    if (t->tracks()) return true;
  return false;
}

template <typename S>
void check_same_shape(const char* op, const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() +
                     " vs " + b.shape().str());
}

template <typename S>
void check_binary(const char* op, const TensorT<S>& mask) {
  for (S v : mask.data())
    if (v != S(0) && v != S(1))
      throw ValidationError(std::string(op) + ": mask entries must be 0 or 1");
}

inline std::size_t axis_span(const Shape& s, std::size_t axis, std::size_t& outer,
                             std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.rank(); ++i) inner *= s[i];
  return s[axis];
}

// C[M x N] += A_eff[M x K] * B_eff[K x N]. transX flips the physical layout
// of that operand (A physical [K x M] when transA, B physical [N x K] when
// transB). Row-major throughout.
template <typename S>
void gemm_accum(bool transA, bool transB, std::size_t M, std::size_t K,
                std::size_t N, const S* A, const S* B, S* C) {
  if (!transA && !transB) {
    for (std::size_t i = 0; i < M; ++i) {
      S* c = C + i * N;
      const S* a = A + i * K;
      for (std::size_t k = 0; k < K; ++k) {
        const S aik = a[k];
        const S* b = B + k * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += aik * b[j];
      }
    }
  } else if (!transA && transB) {
    for (std::size_t i = 0; i < M; ++i) {
      const S* a = A + i * K;
      S* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) {
        const S* b = B + j * K;
        S acc = S(0);
        for (std::size_t k = 0; k < K; ++k) acc += a[k] * b[k];
        c[j] += acc;
      }
    }
  } else if (transA && !transB) {
    for (std::size_t k = 0; k < K; ++k) {
      const S* a = A + k * M;
      const S* b = B + k * N;
      for (std::size_t i = 0; i < M; ++i) {
        const S aki = a[i];
        S* c = C + i * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += aki * b[j];
      }
    }
  } else {
    for (std::size_t k = 0; k < K; ++k) {
      const S* a = A + k * M;
      for (std::size_t i = 0; i < M; ++i) {
        const S aki = a[i];
        S* c = C + i * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += aki * B[j * K + k];
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape("add", a, b);
  TensorT<S> out(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (detail::should_record<S>({&a, &b})) {
    out.mark_tracked();
    auto ad = a.impl(), bd = b.impl(), od = out.impl();
    TapeT<S>::current()->record("add", [ad, bd, od, n] {
      if (od->grad.empty()) return;
      if (detail::tracks(ad)) {
        ad->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) ad->grad[i] += od->grad[i];
      }
      if (detail::tracks(bd)) {
        bd->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) bd->grad[i] += od->grad[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape("sub", a, b);
  TensorT<S> out(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (detail::should_record<S>({&a, &b})) {
    out.mark_tracked();
    auto ad = a.impl(), bd = b.impl(), od = out.impl();
    TapeT<S>::current()->record("sub", [ad, bd, od, n] {
      if (od->grad.empty()) return;
      if (detail::tracks(ad)) {
        ad->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) ad->grad[i] += od->grad[i];
      }
      if (detail::tracks(bd)) {
        bd->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) bd->grad[i] -= od->grad[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape("mul", a, b);
  TensorT<S> out(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (detail::should_record<S>({&a, &b})) {
    out.mark_tracked();
    auto ad = a.impl(), bd = b.impl(), od = out.impl();
    TapeT<S>::current()->record("mul", [ad, bd, od, n] {
      if (od->grad.empty()) return;
      if (detail::tracks(ad)) {
        ad->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) ad->grad[i] += od->grad[i] * bd->value[i];
      }
      if (detail::tracks(bd)) {
        bd->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) bd->grad[i] += od->grad[i] * ad->value[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape("div", a, b);
  TensorT<S> out(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] / b.data()[i];
  if (detail::should_record<S>({&a, &b})) {
    out.mark_tracked();
    auto ad = a.impl(), bd = b.impl(), od = out.impl();
    TapeT<S>::current()->record("div", [ad, bd, od, n] {
      if (od->grad.empty()) return;
      if (detail::tracks(ad)) {
        ad->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) ad->grad[i] += od->grad[i] / bd->value[i];
      }
      if (detail::tracks(bd)) {
        bd->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          bd->grad[i] -= od->grad[i] * ad->value[i] / (bd->value[i] * bd->value[i]);
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S c) {
  TensorT<S> out(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
  if (detail::should_record<S>({&a})) {
    out.mark_tracked();
    auto ad = a.impl(), od = out.impl();
    TapeT<S>::current()->record("scale", [ad, od, c, n] {
      if (od->grad.empty() || !detail::tracks(ad)) return;
      ad->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) ad->grad[i] += od->grad[i] * c;
    });
  }
  return out;
}

template <typename S>
TensorT<S> add_const(const TensorT<S>& a, S c) {
  TensorT<S> out(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + c;
  if (detail::should_record<S>({&a})) {
    out.mark_tracked();
    auto ad = a.impl(), od = out.impl();
    TapeT<S>::current()->record("add_const", [ad, od, n] {
      if (od->grad.empty() || !detail::tracks(ad)) return;
      ad->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) ad->grad[i] += od->grad[i];
    });
  }
  return out;
}

template <typename S>
TensorT<S> relu(const TensorT<S>& a) {
  TensorT<S> out(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i)
    out.data()[i] = a.data()[i] > S(0) ? a.data()[i] : S(0);
  if (detail::should_record<S>({&a})) {
    out.mark_tracked();
    auto ad = a.impl(), od = out.impl();
    TapeT<S>::current()->record("relu", [ad, od, n] {
      if (od->grad.empty() || !detail::tracks(ad)) return;
      ad->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        if (ad->value[i] > S(0)) ad->grad[i] += od->grad[i];
    });
  }
  return out;
}

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& a) {
  TensorT<S> out(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(a.data()[i]);
    out.data()[i] = static_cast<S>(1.0 / (1.0 + std::exp(-x)));
  }
  if (detail::should_record<S>({&a})) {
    out.mark_tracked();
    auto ad = a.impl(), od = out.impl();
    TapeT<S>::current()->record("sigmoid", [ad, od, n] {
      if (od->grad.empty() || !detail::tracks(ad)) return;
      ad->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const S y = od->value[i];
        ad->grad[i] += od->grad[i] * y * (S(1) - y);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + a.shape().str() + " vs " +
                     b.shape().str());
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  TensorT<S> out(Shape{M, N});
  detail::gemm_accum<S>(false, false, M, K, N, a.data().data(), b.data().data(),
                        out.data().data());
  if (detail::should_record<S>({&a, &b})) {
    out.mark_tracked();
    auto ad = a.impl(), bd = b.impl(), od = out.impl();
    TapeT<S>::current()->record("matmul", [ad, bd, od, M, K, N] {
      if (od->grad.empty()) return;
      if (detail::tracks(ad)) {
        ad->ensure_grad();
        detail::gemm_accum<S>(false, true, M, N, K, od->grad.data(),
                              bd->value.data(), ad->grad.data());
      }
      if (detail::tracks(bd)) {
        bd->ensure_grad();
        detail::gemm_accum<S>(true, false, K, M, N, ad->value.data(),
                              od->grad.data(), bd->grad.data());
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> transpose(const TensorT<S>& a) {
  if (a.rank() != 2)
    throw ShapeError("transpose: needs rank-2 input, got " + a.shape().str());
  const std::size_t M = a.dim(0), N = a.dim(1);
  TensorT<S> out(Shape{N, M});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) out.at(j, i) = a.at(i, j);
  if (detail::should_record<S>({&a})) {
    out.mark_tracked();
    auto ad = a.impl(), od = out.impl();
    TapeT<S>::current()->record("transpose", [ad, od, M, N] {
      if (od->grad.empty() || !detail::tracks(ad)) return;
      ad->ensure_grad();
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < N; ++j)
          ad->grad[i * N + j] += od->grad[j * M + i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape manipulation

template <typename S>
TensorT<S> reshape(const TensorT<S>& a, Shape s) {
  if (s.numel() != a.numel())
    throw ShapeError("reshape: element count mismatch " + a.shape().str() +
                     " vs " + s.str());
  TensorT<S> out(std::move(s), a.data());
  if (detail::should_record<S>({&a})) {
    out.mark_tracked();
    auto ad = a.impl(), od = out.impl();
    TapeT<S>::current()->record("reshape", [ad, od] {
      if (od->grad.empty() || !detail::tracks(ad)) return;
      ad->ensure_grad();
      for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
    });
  }
  return out;
}

template <typename S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts, std::size_t axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.rank())
    throw ShapeError("concat: axis " + std::to_string(axis) +
                     " out of range for " + first.str());
  std::vector<std::size_t> dims = first.dims();
  std::size_t total_axis = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.rank())
      throw ShapeError("concat: rank mismatch " + p.shape().str() + " vs " +
                       first.str());
    for (std::size_t i = 0; i < first.rank(); ++i)
      if (i != axis && p.dim(i) != first[i])
        throw ShapeError("concat: shape mismatch " + p.shape().str() + " vs " +
                         first.str());
    total_axis += p.dim(axis);
  }
  dims[axis] = total_axis;
  TensorT<S> out(Shape{dims});

  std::size_t outer, inner;
  detail::axis_span(out.shape(), axis, outer, inner);
  std::size_t axis_offset = 0;
  for (const auto& p : parts) {
    const std::size_t pa = p.dim(axis);
    for (std::size_t o = 0; o < outer; ++o)
      std::memcpy(out.data().data() + (o * total_axis + axis_offset) * inner,
                  p.data().data() + o * pa * inner, pa * inner * sizeof(S));
    axis_offset += pa;
  }

  bool rec = false;
  for (const auto& p : parts)
    if (p.tracks()) rec = true;
  if (rec && TapeT<S>::current() != nullptr) {
    out.mark_tracked();
    std::vector<std::shared_ptr<TensorDataT<S>>> ins;
    for (const auto& p : parts) ins.push_back(p.impl());
    auto od = out.impl();
    TapeT<S>::current()->record("concat", [ins, od, axis, outer, inner, total_axis] {
      if (od->grad.empty()) return;
      std::size_t off = 0;
      for (auto& in : ins) {
        std::size_t o_ax = 1, i_ax = 1;
        detail::axis_span(in->shape, axis, o_ax, i_ax);
        const std::size_t pa = in->shape[axis];
        if (detail::tracks(in)) {
          in->ensure_grad();
          for (std::size_t o = 0; o < outer; ++o) {
            const S* g = od->grad.data() + (o * total_axis + off) * inner;
            S* dst = in->grad.data() + o * pa * inner;
            for (std::size_t i = 0; i < pa * inner; ++i) dst[i] += g[i];
          }
        }
        off += pa;
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> slice(const TensorT<S>& a, std::size_t axis, std::size_t from,
                 std::size_t to) {
  if (axis >= a.rank())
    throw ShapeError("slice: axis " + std::to_string(axis) + " out of range for " +
                     a.shape().str());
  if (from >= to || to > a.dim(axis))
    throw ShapeError("slice: bad range [" + std::to_string(from) + "," +
                     std::to_string(to) + ") for " + a.shape().str());
  std::vector<std::size_t> dims = a.shape().dims();
  dims[axis] = to - from;
  TensorT<S> out(Shape{dims});
  std::size_t outer, inner;
  const std::size_t n_axis = detail::axis_span(a.shape(), axis, outer, inner);
  const std::size_t span = to - from;
  for (std::size_t o = 0; o < outer; ++o)
    std::memcpy(out.data().data() + o * span * inner,
                a.data().data() + (o * n_axis + from) * inner,
                span * inner * sizeof(S));
  if (detail::should_record<S>({&a})) {
    out.mark_tracked();
    auto ad = a.impl(), od = out.impl();
    TapeT<S>::current()->record("slice", [ad, od, outer, inner, n_axis, from, span] {
      if (od->grad.empty() || !detail::tracks(ad)) return;
      ad->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        const S* g = od->grad.data() + o * span * inner;
        S* dst = ad->grad.data() + (o * n_axis + from) * inner;
        for (std::size_t i = 0; i < span * inner; ++i) dst[i] += g[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions

template <typename S>
TensorT<S> reduce_sum(const TensorT<S>& a, std::size_t axis) {
  if (axis >= a.rank())
    throw ShapeError("reduce_sum: axis " + std::to_string(axis) +
                     " out of range for " + a.shape().str());
  std::vector<std::size_t> dims;
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (i != axis) dims.push_back(a.dim(i));
  if (dims.empty()) dims.push_back(1);
  std::size_t outer, inner;
  const std::size_t n_axis = detail::axis_span(a.shape(), axis, outer, inner);
  TensorT<S> out(Shape{dims});
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      double acc = 0.0;
      for (std::size_t t = 0; t < n_axis; ++t)
        acc += static_cast<double>(a.data()[(o * n_axis + t) * inner + in]);
      out.data()[o * inner + in] = static_cast<S>(acc);
    }
  if (detail::should_record<S>({&a})) {
    out.mark_tracked();
    auto ad = a.impl(), od = out.impl();
    TapeT<S>::current()->record("reduce_sum", [ad, od, outer, inner, n_axis] {
      if (od->grad.empty() || !detail::tracks(ad)) return;
      ad->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          const S g = od->grad[o * inner + in];
          for (std::size_t t = 0; t < n_axis; ++t)
            ad->grad[(o * n_axis + t) * inner + in] += g;
        }
    });
  }
  return out;
}

template <typename S>
TensorT<S> reduce_mean(const TensorT<S>& a, std::size_t axis) {
  if (axis >= a.rank())
    throw ShapeError("reduce_mean: axis " + std::to_string(axis) +
                     " out of range for " + a.shape().str());
  TensorT<S> s = reduce_sum(a, axis);
  return scale(s, S(1) / static_cast<S>(a.dim(axis)));
}

template <typename S>
TensorT<S> sum_all(const TensorT<S>& a) {
  TensorT<S> out(Shape{1});
  double acc = 0.0;
  for (S v : a.data()) acc += static_cast<double>(v);
  out.data()[0] = static_cast<S>(acc);
  if (detail::should_record<S>({&a})) {
    out.mark_tracked();
    auto ad = a.impl(), od = out.impl();
    TapeT<S>::current()->record("sum_all", [ad, od] {
      if (od->grad.empty() || !detail::tracks(ad)) return;
      ad->ensure_grad();
      const S g = od->grad[0];
      for (std::size_t i = 0; i < ad->grad.size(); ++i) ad->grad[i] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// normalization and masking

template <typename S>
TensorT<S> softmax(const TensorT<S>& a, std::size_t axis) {
  if (axis >= a.rank())
    throw ShapeError("softmax: axis " + std::to_string(axis) +
                     " out of range for " + a.shape().str());
  std::size_t outer, inner;
  const std::size_t n_axis = detail::axis_span(a.shape(), axis, outer, inner);
  TensorT<S> out(a.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      S mx = a.data()[(o * n_axis) * inner + in];
      for (std::size_t t = 1; t < n_axis; ++t)
        mx = std::max(mx, a.data()[(o * n_axis + t) * inner + in]);
      double sum = 0.0;
      for (std::size_t t = 0; t < n_axis; ++t) {
        const std::size_t idx = (o * n_axis + t) * inner + in;
        const S e = static_cast<S>(std::exp(static_cast<double>(a.data()[idx] - mx)));
        out.data()[idx] = e;
        sum += static_cast<double>(e);
      }
      const S inv = static_cast<S>(1.0 / sum);
      for (std::size_t t = 0; t < n_axis; ++t)
        out.data()[(o * n_axis + t) * inner + in] *= inv;
    }
  if (detail::should_record<S>({&a})) {
    out.mark_tracked();
    auto ad = a.impl(), od = out.impl();
    TapeT<S>::current()->record("softmax", [ad, od, outer, inner, n_axis] {
      if (od->grad.empty() || !detail::tracks(ad)) return;
      ad->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          double dot = 0.0;
          for (std::size_t t = 0; t < n_axis; ++t) {
            const std::size_t idx = (o * n_axis + t) * inner + in;
            dot += static_cast<double>(od->grad[idx]) *
                   static_cast<double>(od->value[idx]);
          }
          for (std::size_t t = 0; t < n_axis; ++t) {
            const std::size_t idx = (o * n_axis + t) * inner + in;
            ad->grad[idx] += od->value[idx] * (od->grad[idx] - static_cast<S>(dot));
          }
        }
    });
  }
  return out;
}

template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gain,
                      const TensorT<S>& bias, S eps) {
  if (x.rank() != 2)
    throw ShapeError("layer_norm: needs rank-2 input, got " + x.shape().str());
  if (eps <= S(0)) throw ConfigError("layer_norm: eps must be > 0");
  const std::size_t T = x.dim(0), D = x.dim(1);
  if (gain.rank() != 1 || gain.dim(0) != D || bias.rank() != 1 || bias.dim(0) != D)
    throw ShapeError("layer_norm: gain/bias must be [D]=" + std::to_string(D) +
                     ", got " + gain.shape().str() + " and " + bias.shape().str());
  TensorT<S> out(x.shape());
  // Normalized rows and inverse stddevs saved for backward.
  auto norm = std::make_shared<std::vector<S>>(T * D);
  auto inv_std = std::make_shared<std::vector<S>>(T);
  for (std::size_t t = 0; t < T; ++t) {
    const S* row = x.data().data() + t * D;
    double mean = 0.0;
    for (std::size_t j = 0; j < D; ++j) mean += static_cast<double>(row[j]);
    mean /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t j = 0; j < D; ++j) {
      const double d = static_cast<double>(row[j]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(D);
    const S istd = static_cast<S>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    (*inv_std)[t] = istd;
    for (std::size_t j = 0; j < D; ++j) {
      const S n = (row[j] - static_cast<S>(mean)) * istd;
      (*norm)[t * D + j] = n;
      out.data()[t * D + j] = n * gain.data()[j] + bias.data()[j];
    }
  }
  if (detail::should_record<S>({&x, &gain, &bias})) {
    out.mark_tracked();
    auto xd = x.impl(), gd = gain.impl(), bd = bias.impl(), od = out.impl();
    TapeT<S>::current()->record("layer_norm", [xd, gd, bd, od, norm, inv_std, T, D] {
      if (od->grad.empty()) return;
      if (detail::tracks(gd)) {
        gd->ensure_grad();
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t j = 0; j < D; ++j)
            gd->grad[j] += od->grad[t * D + j] * (*norm)[t * D + j];
      }
      if (detail::tracks(bd)) {
        bd->ensure_grad();
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t j = 0; j < D; ++j) bd->grad[j] += od->grad[t * D + j];
      }
      if (detail::tracks(xd)) {
        xd->ensure_grad();
        for (std::size_t t = 0; t < T; ++t) {
          double mean_dn = 0.0, mean_dn_n = 0.0;
          for (std::size_t j = 0; j < D; ++j) {
            const double dn = static_cast<double>(od->grad[t * D + j]) *
                              static_cast<double>(gd->value[j]);
            mean_dn += dn;
            mean_dn_n += dn * static_cast<double>((*norm)[t * D + j]);
          }
          mean_dn /= static_cast<double>(D);
          mean_dn_n /= static_cast<double>(D);
          for (std::size_t j = 0; j < D; ++j) {
            const double dn = static_cast<double>(od->grad[t * D + j]) *
                              static_cast<double>(gd->value[j]);
            xd->grad[t * D + j] += static_cast<S>(
                static_cast<double>((*inv_std)[t]) *
                (dn - mean_dn - static_cast<double>((*norm)[t * D + j]) * mean_dn_n));
          }
        }
      }
    });
  }
  return out;
}

// mask must match x's shape, or be rank-1 matching x's last axis (broadcast
// across leading axes). Gradient flows only through kept (mask=1) positions.
template <typename S>
TensorT<S> masked_fill(const TensorT<S>& x, const TensorT<S>& mask, S value) {
  const bool bcast = mask.rank() == 1 && mask.dim(0) == x.dim(x.rank() - 1) &&
                     mask.shape() != x.shape();
  if (!bcast && mask.shape() != x.shape())
    throw ShapeError("masked_fill: mask " + mask.shape().str() +
                     " neither matches " + x.shape().str() +
                     " nor broadcasts over its last axis");
  detail::check_binary("masked_fill", mask);
  const std::size_t n = x.numel();
  const std::size_t last = x.dim(x.rank() - 1);
  TensorT<S> out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const S m = bcast ? mask.data()[i % last] : mask.data()[i];
    out.data()[i] = m == S(1) ? x.data()[i] : value;
  }
  if (detail::should_record<S>({&x})) {
    out.mark_tracked();
    auto xd = x.impl(), md = mask.impl(), od = out.impl();
    TapeT<S>::current()->record("masked_fill", [xd, md, od, n, last, bcast] {
      if (od->grad.empty() || !detail::tracks(xd)) return;
      xd->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const S m = bcast ? md->value[i % last] : md->value[i];
        if (m == S(1)) xd->grad[i] += od->grad[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// convolution

// Cross-correlation of x[Cin x H x W] with w[Cout x Cin x k x k].
template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, std::size_t stride,
                  std::size_t pad) {
  if (x.rank() != 3 || w.rank() != 4)
    throw ShapeError("conv2d: need x rank 3 and w rank 4, got " +
                     x.shape().str() + " and " + w.shape().str());
  const std::size_t Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t Cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != Cin)
    throw ShapeError("conv2d: channel mismatch " + x.shape().str() + " vs " +
                     w.shape().str());
  if (w.dim(3) != k || k % 2 == 0)
    throw ConfigError("conv2d: kernel must be square with odd extent, got " +
                      w.shape().str());
  if (stride == 0) throw ConfigError("conv2d: stride must be >= 1");
  const std::size_t padded_h = H + 2 * pad, padded_w = W + 2 * pad;
  if (padded_h < k || padded_w < k || (padded_h - k) % stride != 0 ||
      (padded_w - k) % stride != 0)
    throw ConfigError("conv2d: non-integral output extent for input " +
                      x.shape().str() + ", kernel " + std::to_string(k) +
                      ", stride " + std::to_string(stride) + ", pad " +
                      std::to_string(pad));
  const std::size_t Ho = (padded_h - k) / stride + 1;
  const std::size_t Wo = (padded_w - k) / stride + 1;
  TensorT<S> out(Shape{Cout, Ho, Wo});

  const S* xp = x.data().data();
  const S* wp = w.data().data();
  S* op = out.data().data();
  const long p = static_cast<long>(pad);
  for (std::size_t co = 0; co < Cout; ++co)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        S acc = S(0);
        for (std::size_t ci = 0; ci < Cin; ++ci)
          for (std::size_t ky = 0; ky < k; ++ky) {
            const long iy = static_cast<long>(oy * stride + ky) - p;
            if (iy < 0 || iy >= static_cast<long>(H)) continue;
            const S* xrow = xp + (ci * H + static_cast<std::size_t>(iy)) * W;
            const S* wrow = wp + ((co * Cin + ci) * k + ky) * k;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long ix = static_cast<long>(ox * stride + kx) - p;
              if (ix < 0 || ix >= static_cast<long>(W)) continue;
              acc += xrow[ix] * wrow[kx];
            }
          }
        op[(co * Ho + oy) * Wo + ox] = acc;
      }

  if (detail::should_record<S>({&x, &w})) {
    out.mark_tracked();
    auto xd = x.impl(), wd = w.impl(), od = out.impl();
    TapeT<S>::current()->record("conv2d", [xd, wd, od, Cin, H, W, Cout, k, Ho, Wo,
                                           stride, p] {
      if (od->grad.empty()) return;
      const bool gx = detail::tracks(xd);
      const bool gw = detail::tracks(wd);
      if (gx) xd->ensure_grad();
      if (gw) wd->ensure_grad();
      if (!gx && !gw) return;
      for (std::size_t co = 0; co < Cout; ++co)
        for (std::size_t oy = 0; oy < Ho; ++oy)
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const S g = od->grad[(co * Ho + oy) * Wo + ox];
            if (g == S(0)) continue;
            for (std::size_t ci = 0; ci < Cin; ++ci)
              for (std::size_t ky = 0; ky < k; ++ky) {
                const long iy = static_cast<long>(oy * stride + ky) - p;
                if (iy < 0 || iy >= static_cast<long>(H)) continue;
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const long ix = static_cast<long>(ox * stride + kx) - p;
                  if (ix < 0 || ix >= static_cast<long>(W)) continue;
                  const std::size_t xi =
                      (ci * H + static_cast<std::size_t>(iy)) * W +
                      static_cast<std::size_t>(ix);
                  const std::size_t wi = ((co * Cin + ci) * k + ky) * k + kx;
                  if (gx) xd->grad[xi] += wd->value[wi] * g;
                  if (gw) wd->grad[wi] += xd->value[xi] * g;
                }
              }
          }
    });
  }
  return out;
}

// Adds b[C] to every spatial position of x[C x H x W].
template <typename S>
TensorT<S> bias_channels(const TensorT<S>& x, const TensorT<S>& b) {
  if (x.rank() != 3 || b.rank() != 1 || b.dim(0) != x.dim(0))
    throw ShapeError("bias_channels: need x [CxHxW] and b [C], got " +
                     x.shape().str() + " and " + b.shape().str());
  const std::size_t C = x.dim(0), HW = x.dim(1) * x.dim(2);
  TensorT<S> out(x.shape());
  for (std::size_t c = 0; c < C; ++c) {
    const S bc = b.data()[c];
    for (std::size_t i = 0; i < HW; ++i)
      out.data()[c * HW + i] = x.data()[c * HW + i] + bc;
  }
  if (detail::should_record<S>({&x, &b})) {
    out.mark_tracked();
    auto xd = x.impl(), bd = b.impl(), od = out.impl();
    TapeT<S>::current()->record("bias_channels", [xd, bd, od, C, HW] {
      if (od->grad.empty()) return;
      if (detail::tracks(xd)) {
        xd->ensure_grad();
        for (std::size_t i = 0; i < C * HW; ++i) xd->grad[i] += od->grad[i];
      }
      if (detail::tracks(bd)) {
        bd->ensure_grad();
        for (std::size_t c = 0; c < C; ++c) {
          double acc = 0.0;
          for (std::size_t i = 0; i < HW; ++i)
            acc += static_cast<double>(od->grad[c * HW + i]);
          bd->grad[c] += static_cast<S>(acc);
        }
      }
    });
  }
  return out;
}

// Adds b[D] to every row of x[T x D].
template <typename S>
TensorT<S> bias_rows(const TensorT<S>& x, const TensorT<S>& b) {
  if (x.rank() != 2 || b.rank() != 1 || b.dim(0) != x.dim(1))
    throw ShapeError("bias_rows: need x [TxD] and b [D], got " +
                     x.shape().str() + " and " + b.shape().str());
  const std::size_t T = x.dim(0), D = x.dim(1);
  TensorT<S> out(x.shape());
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < D; ++j)
      out.data()[t * D + j] = x.data()[t * D + j] + b.data()[j];
  if (detail::should_record<S>({&x, &b})) {
    out.mark_tracked();
    auto xd = x.impl(), bd = b.impl(), od = out.impl();
    TapeT<S>::current()->record("bias_rows", [xd, bd, od, T, D] {
      if (od->grad.empty()) return;
      if (detail::tracks(xd)) {
        xd->ensure_grad();
        for (std::size_t i = 0; i < T * D; ++i) xd->grad[i] += od->grad[i];
      }
      if (detail::tracks(bd)) {
        bd->ensure_grad();
        for (std::size_t j = 0; j < D; ++j) {
          double acc = 0.0;
          for (std::size_t t = 0; t < T; ++t)
            acc += static_cast<double>(od->grad[t * D + j]);
          bd->grad[j] += static_cast<S>(acc);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// geometry helpers for feature maps

// [D x h x w] -> [h*w x D], tokens ordered row-major over (h, w).
template <typename S>
TensorT<S> to_tokens(const TensorT<S>& fmap) {
  if (fmap.rank() != 3)
    throw ShapeError("to_tokens: needs [DxHxW], got " + fmap.shape().str());
  const std::size_t D = fmap.dim(0), HW = fmap.dim(1) * fmap.dim(2);
  TensorT<S> out(Shape{HW, D});
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t t = 0; t < HW; ++t)
      out.data()[t * D + d] = fmap.data()[d * HW + t];
  if (detail::should_record<S>({&fmap})) {
    out.mark_tracked();
    auto fd = fmap.impl(), od = out.impl();
    TapeT<S>::current()->record("to_tokens", [fd, od, D, HW] {
      if (od->grad.empty() || !detail::tracks(fd)) return;
      fd->ensure_grad();
      for (std::size_t d = 0; d < D; ++d)
        for (std::size_t t = 0; t < HW; ++t)
          fd->grad[d * HW + t] += od->grad[t * D + d];
    });
  }
  return out;
}

// [h*w x D] -> [D x h x w].
template <typename S>
TensorT<S> from_tokens(const TensorT<S>& tokens, std::size_t h, std::size_t w) {
  if (tokens.rank() != 2 || tokens.dim(0) != h * w)
    throw ShapeError("from_tokens: tokens " + tokens.shape().str() +
                     " do not match " + std::to_string(h) + "x" + std::to_string(w));
  const std::size_t D = tokens.dim(1), HW = h * w;
  TensorT<S> out(Shape{D, h, w});
  for (std::size_t t = 0; t < HW; ++t)
    for (std::size_t d = 0; d < D; ++d)
      out.data()[d * HW + t] = tokens.data()[t * D + d];
  if (detail::should_record<S>({&tokens})) {
    out.mark_tracked();
    auto td = tokens.impl(), od = out.impl();
    TapeT<S>::current()->record("from_tokens", [td, od, D, HW] {
      if (od->grad.empty() || !detail::tracks(td)) return;
      td->ensure_grad();
      for (std::size_t t = 0; t < HW; ++t)
        for (std::size_t d = 0; d < D; ++d)
          td->grad[t * D + d] += od->grad[d * HW + t];
    });
  }
  return out;
}

// Tiles v[D] across an h x w grid -> [D x h x w].
template <typename S>
TensorT<S> expand_spatial(const TensorT<S>& v, std::size_t h, std::size_t w) {
  if (v.rank() != 1)
    throw ShapeError("expand_spatial: needs [D], got " + v.shape().str());
  const std::size_t D = v.dim(0), HW = h * w;
  TensorT<S> out(Shape{D, h, w});
  for (std::size_t d = 0; d < D; ++d) {
    const S val = v.data()[d];
    for (std::size_t i = 0; i < HW; ++i) out.data()[d * HW + i] = val;
  }
  if (detail::should_record<S>({&v})) {
    out.mark_tracked();
    auto vd = v.impl(), od = out.impl();
    TapeT<S>::current()->record("expand_spatial", [vd, od, D, HW] {
      if (od->grad.empty() || !detail::tracks(vd)) return;
      vd->ensure_grad();
      for (std::size_t d = 0; d < D; ++d) {
        double acc = 0.0;
        for (std::size_t i = 0; i < HW; ++i)
          acc += static_cast<double>(od->grad[d * HW + i]);
        vd->grad[d] += static_cast<S>(acc);
      }
    });
  }
  return out;
}

// Nearest-neighbor upsample of a [h x w] map by an integer factor.
template <typename S>
TensorT<S> upsample_nearest(const TensorT<S>& x, std::size_t factor) {
  if (x.rank() != 2)
    throw ShapeError("upsample_nearest: needs [hxw], got " + x.shape().str());
  if (factor == 0) throw ConfigError("upsample_nearest: factor must be >= 1");
  const std::size_t h = x.dim(0), w = x.dim(1);
  const std::size_t H = h * factor, W = w * factor;
  TensorT<S> out(Shape{H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t xx = 0; xx < W; ++xx)
      out.data()[y * W + xx] = x.data()[(y / factor) * w + (xx / factor)];
  if (detail::should_record<S>({&x})) {
    out.mark_tracked();
    auto xd = x.impl(), od = out.impl();
    TapeT<S>::current()->record("upsample_nearest", [xd, od, h, w, H, W, factor] {
      if (od->grad.empty() || !detail::tracks(xd)) return;
      xd->ensure_grad();
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx)
          xd->grad[(y / factor) * w + (xx / factor)] += od->grad[y * W + xx];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// similarity

// Rows of x[T x D] scaled to unit L2 norm; zero-norm rows map to zero rows
// (with a warning) so downstream cosine logits stay finite.
template <typename S>
TensorT<S> row_l2_normalize(const TensorT<S>& x) {
  if (x.rank() != 2)
    throw ShapeError("row_l2_normalize: needs [TxD], got " + x.shape().str());
  const std::size_t T = x.dim(0), D = x.dim(1);
  constexpr double kTiny = 1e-12;
  TensorT<S> out(x.shape());
  auto norms = std::make_shared<std::vector<double>>(T);
  for (std::size_t t = 0; t < T; ++t) {
    double nsq = 0.0;
    for (std::size_t j = 0; j < D; ++j) {
      const double v = static_cast<double>(x.data()[t * D + j]);
      nsq += v * v;
    }
    const double n = std::sqrt(nsq);
    (*norms)[t] = n;
    if (n < kTiny) {
      warnings::bump(warnings::Kind::zero_norm_cosine);
      for (std::size_t j = 0; j < D; ++j) out.data()[t * D + j] = S(0);
    } else {
      const S inv = static_cast<S>(1.0 / n);
      for (std::size_t j = 0; j < D; ++j)
        out.data()[t * D + j] = x.data()[t * D + j] * inv;
    }
  }
  if (detail::should_record<S>({&x})) {
    out.mark_tracked();
    auto xd = x.impl(), od = out.impl();
    TapeT<S>::current()->record("row_l2_normalize", [xd, od, norms, T, D] {
      if (od->grad.empty() || !detail::tracks(xd)) return;
      xd->ensure_grad();
      for (std::size_t t = 0; t < T; ++t) {
        const double n = (*norms)[t];
        if (n < kTiny) continue;  // constant zero row, no gradient
        double dot = 0.0;
        for (std::size_t j = 0; j < D; ++j)
          dot += static_cast<double>(od->grad[t * D + j]) *
                 static_cast<double>(od->value[t * D + j]);
        for (std::size_t j = 0; j < D; ++j)
          xd->grad[t * D + j] += static_cast<S>(
              (static_cast<double>(od->grad[t * D + j]) -
               static_cast<double>(od->value[t * D + j]) * dot) /
              n);
      }
    });
  }
  return out;
}

// cos(a, b) for vectors; returns 0 (with a warning) when either norm is zero
// so empty prototypes cannot poison training with NaNs.
template <typename S>
TensorT<S> cosine_similarity(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != 1 || b.rank() != 1 || a.dim(0) != b.dim(0))
    throw ShapeError("cosine_similarity: need matching vectors, got " +
                     a.shape().str() + " vs " + b.shape().str());
  const std::size_t D = a.dim(0);
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (std::size_t j = 0; j < D; ++j) {
    const double av = static_cast<double>(a.data()[j]);
    const double bv = static_cast<double>(b.data()[j]);
    dot += av * bv;
    na2 += av * av;
    nb2 += bv * bv;
  }
  const double na = std::sqrt(na2), nb = std::sqrt(nb2);
  constexpr double kTiny = 1e-12;
  if (na < kTiny || nb < kTiny) {
    warnings::bump(warnings::Kind::zero_norm_cosine);
    return TensorT<S>::scalar(S(0));
  }
  const double c = dot / (na * nb);
  TensorT<S> out = TensorT<S>::scalar(static_cast<S>(c));
  if (detail::should_record<S>({&a, &b})) {
    out.mark_tracked();
    auto ad = a.impl(), bd = b.impl(), od = out.impl();
    TapeT<S>::current()->record("cosine_similarity", [ad, bd, od, D, na, nb, c] {
      if (od->grad.empty()) return;
      const double g = static_cast<double>(od->grad[0]);
      if (detail::tracks(ad)) {
        ad->ensure_grad();
        for (std::size_t j = 0; j < D; ++j)
          ad->grad[j] += static_cast<S>(
              g * (static_cast<double>(bd->value[j]) / (na * nb) -
                   c * static_cast<double>(ad->value[j]) / (na * na)));
      }
      if (detail::tracks(bd)) {
        bd->ensure_grad();
        for (std::size_t j = 0; j < D; ++j)
          bd->grad[j] += static_cast<S>(
              g * (static_cast<double>(ad->value[j]) / (na * nb) -
                   c * static_cast<double>(bd->value[j]) / (nb * nb)));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// losses

// Mean binary cross-entropy of probabilities against a constant target.
template <typename S>
TensorT<S> bce_loss(const TensorT<S>& probs, const TensorT<S>& target) {
  detail::check_same_shape("bce_loss", probs, target);
  const std::size_t n = probs.numel();
  constexpr double kEps = 1e-7;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::clamp(static_cast<double>(probs.data()[i]), kEps, 1.0 - kEps);
    const double t = static_cast<double>(target.data()[i]);
    acc -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
  }
  TensorT<S> out = TensorT<S>::scalar(static_cast<S>(acc / static_cast<double>(n)));
  if (detail::should_record<S>({&probs})) {
    out.mark_tracked();
    auto pd = probs.impl(), td = target.impl(), od = out.impl();
    TapeT<S>::current()->record("bce_loss", [pd, td, od, n] {
      if (od->grad.empty() || !detail::tracks(pd)) return;
      pd->ensure_grad();
      const double g = static_cast<double>(od->grad[0]) / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double p = static_cast<double>(pd->value[i]);
        if (p <= kEps || p >= 1.0 - kEps) continue;  // clamped flat region
        const double t = static_cast<double>(td->value[i]);
        pd->grad[i] += static_cast<S>(g * (p - t) / (p * (1.0 - p)));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// optimizer

// p <- p - lr * grad(p), then grads are zeroed. Every tensor must have a
// populated gradient buffer.
template <typename S>
void sgd_step(std::vector<TensorT<S>>& params, S lr) {
  for (auto& p : params)
    if (!p.has_grad())
      throw UsageError("sgd_step: parameter with shape " + p.shape().str() +
                       " has no gradient; run backward() first");
  for (auto& p : params) {
    const std::size_t n = p.numel();
    for (std::size_t i = 0; i < n; ++i) p.data()[i] -= lr * p.grad()[i];
    p.zero_grad();
  }
}

}  // namespace catnet
