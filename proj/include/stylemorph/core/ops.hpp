#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#if defined(__AVX512F__) || defined(__AVX2__)
#include <immintrin.h>
#endif

#include "stylemorph/core/tensor.hpp"

// Differentiable primitives. Every backward rule is itself written in terms
// of the ops below, so gradients are graph-recorded values and gradients of
// gradients (needed by the R1 penalty) come out of the same machinery.
// Piecewise-linear factors (abs sign, leaky-relu mask) are treated as
// constants of the forward pass, which is the almost-everywhere derivative.
namespace stylemorph::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor sum(const Tensor& a);
Tensor bcast_scalar(const Tensor& s, const std::vector<int>& shape);
Tensor recip(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor lrelu(const Tensor& a, double slope);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor im2col(const Tensor& x, int kh, int kw, int stride, int pad);
Tensor col2im(const Tensor& cols, std::vector<int> img_shape, int kh, int kw, int stride, int pad);
Tensor rows2nchw(const Tensor& rows, int n, int c, int h, int w);
Tensor nchw2rows(const Tensor& x);
Tensor avgpool2(const Tensor& x);
Tensor upsample2(const Tensor& x);
Tensor sum_hw(const Tensor& x);
Tensor bcast_nc(const Tensor& s, int h, int w);
Tensor sum0(const Tensor& x);
Tensor bcast0(const Tensor& v, int n);
Tensor sum1(const Tensor& x);
Tensor bcast1(const Tensor& v, int d);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_cols(const Tensor& x, int off, int len);
Tensor concat_c(const Tensor& a, const Tensor& b);
Tensor slice_c(const Tensor& x, int off, int len);

namespace detail {

using stylemorph::detail::make_op;

[[noreturn]] inline void fail(const std::string& op, const std::string& what) {
  throw std::invalid_argument(op + ": " + what);
}

inline void need_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail(op, "shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

inline void need_ndim(const char* op, const Tensor& t, int nd) {
  if (t.ndim() != nd)
    fail(op, "expected " + std::to_string(nd) + "-d tensor, got " + t.shape_str());
}

// Pooled output buffer filled with f applied per element.
template <class F>
inline std::vector<double> map1(const Tensor& a, F&& f) {
  std::vector<double> out = stylemorph::detail::uninit_buffer(a.data().size());
  const double* pa = a.ptr();
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(pa[i]);
  return out;
}

template <class F>
inline std::vector<double> map2(const Tensor& a, const Tensor& b, F&& f) {
  std::vector<double> out = stylemorph::detail::uninit_buffer(a.data().size());
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(pa[i], pb[i]);
  return out;
}

}  // namespace detail

// ===================== elementwise =====================

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::need_same_shape("add", a, b);
  return detail::make_op("add", a.shape(), detail::map2(a, b, [](double x, double y) { return x + y; }),
                         {a, b}, [](const Tensor& g) { return std::vector<Tensor>{g, g}; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::need_same_shape("sub", a, b);
  return detail::make_op("sub", a.shape(), detail::map2(a, b, [](double x, double y) { return x - y; }),
                         {a, b}, [](const Tensor& g) { return std::vector<Tensor>{g, neg(g)}; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::need_same_shape("mul", a, b);
  return detail::make_op("mul", a.shape(), detail::map2(a, b, [](double x, double y) { return x * y; }),
                         {a, b}, [a, b](const Tensor& g) {
                           return std::vector<Tensor>{mul(g, b), mul(g, a)};
                         });
}

inline Tensor neg(const Tensor& a) {
  return detail::make_op("neg", a.shape(), detail::map1(a, [](double x) { return -x; }), {a},
                         [](const Tensor& g) { return std::vector<Tensor>{neg(g)}; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::make_op("add_scalar", a.shape(), detail::map1(a, [c](double x) { return x + c; }),
                         {a}, [](const Tensor& g) { return std::vector<Tensor>{g}; });
}

inline Tensor mul_scalar(const Tensor& a, double c) {
  return detail::make_op("mul_scalar", a.shape(), detail::map1(a, [c](double x) { return x * c; }),
                         {a},
                         [c](const Tensor& g) { return std::vector<Tensor>{mul_scalar(g, c)}; });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  std::vector<int> shape = a.shape();
  return detail::make_op("sum", {1}, {s}, {a}, [shape](const Tensor& g) {
    return std::vector<Tensor>{bcast_scalar(g, shape)};
  });
}

inline Tensor bcast_scalar(const Tensor& s, const std::vector<int>& shape) {
  if (s.numel() != 1) detail::fail("bcast_scalar", "source is not scalar");
  std::vector<double> out =
      stylemorph::detail::uninit_buffer(static_cast<size_t>(Tensor::shape_numel(shape)));
  std::fill(out.begin(), out.end(), s.data()[0]);
  return detail::make_op("bcast_scalar", shape, std::move(out), {s},
                         [](const Tensor& g) { return std::vector<Tensor>{sum(g)}; });
}

inline Tensor recip(const Tensor& a) {
  return detail::make_op("recip", a.shape(), detail::map1(a, [](double x) { return 1.0 / x; }),
                         {a}, [a](const Tensor& g) {
                           Tensor r = recip(a);
                           return std::vector<Tensor>{neg(mul(g, mul(r, r)))};
                         });
}

inline Tensor log(const Tensor& a) {
  return detail::make_op("log", a.shape(), detail::map1(a, [](double x) { return std::log(x); }),
                         {a}, [a](const Tensor& g) {
                           return std::vector<Tensor>{mul(g, recip(a))};
                         });
}

inline Tensor exp(const Tensor& a) {
  return detail::make_op("exp", a.shape(), detail::map1(a, [](double x) { return std::exp(x); }),
                         {a}, [a](const Tensor& g) {
                           return std::vector<Tensor>{mul(g, exp(a))};
                         });
}

inline Tensor sqrt(const Tensor& a) {
  return detail::make_op("sqrt", a.shape(), detail::map1(a, [](double x) { return std::sqrt(x); }),
                         {a}, [a](const Tensor& g) {
                           return std::vector<Tensor>{mul(g, mul_scalar(recip(sqrt(a)), 0.5))};
                         });
}

inline Tensor tanh(const Tensor& a) {
  return detail::make_op("tanh", a.shape(), detail::map1(a, [](double x) { return std::tanh(x); }),
                         {a}, [a](const Tensor& g) {
                           Tensor t = tanh(a);
                           return std::vector<Tensor>{mul(g, add_scalar(neg(mul(t, t)), 1.0))};
                         });
}

inline Tensor sigmoid(const Tensor& a) {
  auto stable = [](double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  };
  return detail::make_op("sigmoid", a.shape(), detail::map1(a, stable), {a},
                         [a](const Tensor& g) {
                           Tensor s = sigmoid(a);
                           return std::vector<Tensor>{mul(g, mul(s, add_scalar(neg(s), 1.0)))};
                         });
}

// softplus(x) = log(1 + exp(x)), evaluated overflow-free.
inline Tensor softplus(const Tensor& a) {
  auto stable = [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); };
  return detail::make_op("softplus", a.shape(), detail::map1(a, stable), {a},
                         [a](const Tensor& g) {
                           return std::vector<Tensor>{mul(g, sigmoid(a))};
                         });
}

inline Tensor abs(const Tensor& a) {
  std::vector<double> out = stylemorph::detail::uninit_buffer(a.data().size());
  std::vector<double> sign = stylemorph::detail::uninit_buffer(out.size());
  const double* pa = a.ptr();
  for (size_t i = 0; i < out.size(); ++i) {
    sign[i] = pa[i] > 0.0 ? 1.0 : (pa[i] < 0.0 ? -1.0 : 0.0);
    out[i] = std::abs(pa[i]);
  }
  Tensor sgn = Tensor::from_data(a.shape(), std::move(sign));
  return detail::make_op("abs", a.shape(), std::move(out), {a}, [sgn](const Tensor& g) {
    return std::vector<Tensor>{mul(g, sgn)};
  });
}

inline Tensor lrelu(const Tensor& a, double slope = 0.2) {
  std::vector<double> out = stylemorph::detail::uninit_buffer(a.data().size());
  std::vector<double> mask = stylemorph::detail::uninit_buffer(out.size());
  const double* pa = a.ptr();
  for (size_t i = 0; i < out.size(); ++i) {
    mask[i] = pa[i] > 0.0 ? 1.0 : slope;
    out[i] = pa[i] * mask[i];
  }
  Tensor m = Tensor::from_data(a.shape(), std::move(mask));
  return detail::make_op("lrelu", a.shape(), std::move(out), {a}, [m](const Tensor& g) {
    return std::vector<Tensor>{mul(g, m)};
  });
}

// ===================== linear algebra =====================

namespace detail {

// Fixed-width vector wrapper for the GEMM kernels. Each lane of every path
// computes its output element as one fused multiply-add chain over ascending
// kk, so results are bit-identical no matter which tile shape, vector width,
// or scalar edge handled the element, and a row block touches only its own
// rows of A and C. Batched evaluation therefore agrees bit for bit with
// evaluating the rows one at a time. Explicit intrinsics are used because
// auto-vectorization of the scalar form is allowed to (and does) pick layouts
// that shuffle accumulators every iteration.
#if defined(__AVX512F__) && defined(__FMA__)
struct VecD {
  static constexpr int kWidth = 8;
  __m512d v;
  static VecD zero() { return {_mm512_setzero_pd()}; }
  static VecD load(const double* p) { return {_mm512_loadu_pd(p)}; }
  static VecD bcast(double x) { return {_mm512_set1_pd(x)}; }
  static VecD fma(VecD a, VecD b, VecD c) { return {_mm512_fmadd_pd(a.v, b.v, c.v)}; }
  void store(double* p) const { _mm512_storeu_pd(p, v); }
};
#elif defined(__AVX2__) && defined(__FMA__)
struct VecD {
  static constexpr int kWidth = 4;
  __m256d v;
  static VecD zero() { return {_mm256_setzero_pd()}; }
  static VecD load(const double* p) { return {_mm256_loadu_pd(p)}; }
  static VecD bcast(double x) { return {_mm256_set1_pd(x)}; }
  static VecD fma(VecD a, VecD b, VecD c) { return {_mm256_fmadd_pd(a.v, b.v, c.v)}; }
  void store(double* p) const { _mm256_storeu_pd(p, v); }
};
#else
struct VecD {
  static constexpr int kWidth = 1;
  double v;
  static VecD zero() { return {0.0}; }
  static VecD load(const double* p) { return {*p}; }
  static VecD bcast(double x) { return {x}; }
  static VecD fma(VecD a, VecD b, VecD c) { return {std::fma(a.v, b.v, c.v)}; }
  void store(double* p) const { *p = v; }
};
#endif

// All products run through one strided driver computing
//   C(i,j) = sum_kk A(i,kk) * B(kk,j),  A(i,kk) = a[i*rstep + kk*kstep],
// with B and C row-major. Plain and transposed-A layouts differ only in
// (rstep, kstep), so a transposed-first-operand product never materializes
// a transposed copy.
template <int R, int JV>
inline void gemm_tile(const double* pa, std::ptrdiff_t rstep, std::ptrdiff_t kstep,
                      const double* b, std::ptrdiff_t ldb, double* c, std::ptrdiff_t ldc,
                      int k) {
  VecD acc[R][JV];
  for (int r = 0; r < R; ++r)
    for (int jv = 0; jv < JV; ++jv) acc[r][jv] = VecD::zero();
  for (int kk = 0; kk < k; ++kk) {
    const double* brow = b + kk * ldb;
    VecD bv[JV];
    for (int jv = 0; jv < JV; ++jv) bv[jv] = VecD::load(brow + jv * VecD::kWidth);
    for (int r = 0; r < R; ++r) {
      const VecD ar = VecD::bcast(pa[r * rstep + kk * kstep]);
      for (int jv = 0; jv < JV; ++jv) acc[r][jv] = VecD::fma(ar, bv[jv], acc[r][jv]);
    }
  }
  for (int r = 0; r < R; ++r)
    for (int jv = 0; jv < JV; ++jv) acc[r][jv].store(c + r * ldc + jv * VecD::kWidth);
}

inline void gemm_edge(const double* pa, std::ptrdiff_t rstep, std::ptrdiff_t kstep,
                      const double* b, std::ptrdiff_t ldb, double* c, std::ptrdiff_t ldc,
                      int k, int rows, int j0, int j1) {
  for (int r = 0; r < rows; ++r)
    for (int j = j0; j < j1; ++j) {
      double s = 0.0;
      for (int kk = 0; kk < k; ++kk)
        s = std::fma(pa[r * rstep + kk * kstep], b[kk * ldb + j], s);
      c[r * ldc + j] = s;
    }
}

inline void gemm_strided(const double* a, std::ptrdiff_t rstep, std::ptrdiff_t kstep,
                         const double* b, double* c, int m, int k, int n) {
  constexpr int kW = VecD::kWidth;
  const int j2 = n - n % (2 * kW);
  const int j1 = n - n % kW;
  auto row_block = [&](int i0, auto rows_c) {
    constexpr int R = decltype(rows_c)::value;
    const double* pa = a + i0 * rstep;
    double* crow = c + static_cast<std::ptrdiff_t>(i0) * n;
    int j = 0;
    for (; j < j2; j += 2 * kW)
      gemm_tile<R, 2>(pa, rstep, kstep, b + j, n, crow + j, n, k);
    for (; j < j1; j += kW) gemm_tile<R, 1>(pa, rstep, kstep, b + j, n, crow + j, n, k);
    if (j < n) gemm_edge(pa, rstep, kstep, b, n, crow, n, k, R, j, n);
  };
  int i = 0;
  for (; i + 4 <= m; i += 4) row_block(i, std::integral_constant<int, 4>{});
  for (; i < m; ++i) row_block(i, std::integral_constant<int, 1>{});
}

// Cache-blocked out-of-place transpose of a rows x cols row-major matrix.
inline std::vector<double> raw_transpose(const double* src, int rows, int cols) {
  std::vector<double> out = stylemorph::detail::uninit_buffer(static_cast<size_t>(rows) * cols);
  constexpr int kTile = 32;
  for (int i0 = 0; i0 < rows; i0 += kTile)
    for (int j0 = 0; j0 < cols; j0 += kTile) {
      const int i1 = std::min(i0 + kTile, rows), j1 = std::min(j0 + kTile, cols);
      for (int i = i0; i < i1; ++i)
        for (int j = j0; j < j1; ++j)
          out[static_cast<size_t>(j) * rows + i] = src[static_cast<size_t>(i) * cols + j];
    }
  return out;
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::need_ndim("matmul", a, 2);
  detail::need_ndim("matmul", b, 2);
  if (a.dim(1) != b.dim(0))
    detail::fail("matmul", "inner dims differ " + a.shape_str() + " vs " + b.shape_str());
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out = stylemorph::detail::uninit_buffer(static_cast<size_t>(m) * n);
  detail::gemm_strided(a.ptr(), k, 1, b.ptr(), out.data(), m, k, n);
  return detail::make_op("matmul", {m, n}, std::move(out), {a, b},
                         [a, b](const Tensor& g, const std::vector<char>& need) {
                           return std::vector<Tensor>{need[0] ? matmul_nt(g, b) : Tensor{},
                                                      need[1] ? matmul_tn(a, g) : Tensor{}};
                         });
}

// C = A * B^T for a [m,k], b [n,k]. B columns must be contiguous for the
// vector loads, so the (usually small) b operand is transposed once; the
// per-element guarantees carry over unchanged.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::need_ndim("matmul_nt", a, 2);
  detail::need_ndim("matmul_nt", b, 2);
  if (a.dim(1) != b.dim(1))
    detail::fail("matmul_nt", "inner dims differ " + a.shape_str() + " vs " + b.shape_str());
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<double> bt = detail::raw_transpose(b.ptr(), n, k);  // [k, n]
  std::vector<double> out = stylemorph::detail::uninit_buffer(static_cast<size_t>(m) * n);
  detail::gemm_strided(a.ptr(), k, 1, bt.data(), out.data(), m, k, n);
  stylemorph::detail::buffer_pool().release(std::move(bt));
  return detail::make_op("matmul_nt", {m, n}, std::move(out), {a, b},
                         [a, b](const Tensor& g, const std::vector<char>& need) {
                           return std::vector<Tensor>{need[0] ? matmul(g, b) : Tensor{},
                                                      need[1] ? matmul_tn(g, a) : Tensor{}};
                         });
}

// C = A^T * B for a [m,k], b [m,n]. The strided driver reads A in place.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  detail::need_ndim("matmul_tn", a, 2);
  detail::need_ndim("matmul_tn", b, 2);
  if (a.dim(0) != b.dim(0))
    detail::fail("matmul_tn", "outer dims differ " + a.shape_str() + " vs " + b.shape_str());
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out = stylemorph::detail::uninit_buffer(static_cast<size_t>(k) * n);
  detail::gemm_strided(a.ptr(), 1, k, b.ptr(), out.data(), k, m, n);
  return detail::make_op("matmul_tn", {k, n}, std::move(out), {a, b},
                         [a, b](const Tensor& g, const std::vector<char>& need) {
                           return std::vector<Tensor>{need[0] ? matmul_nt(b, g) : Tensor{},
                                                      need[1] ? matmul(a, g) : Tensor{}};
                         });
}

inline Tensor transpose2d(const Tensor& a) {
  detail::need_ndim("transpose2d", a, 2);
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out = stylemorph::detail::uninit_buffer(static_cast<size_t>(m) * n);
  const double* p = a.ptr();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = p[static_cast<size_t>(i) * n + j];
  return detail::make_op("transpose2d", {n, m}, std::move(out), {a},
                         [](const Tensor& g) { return std::vector<Tensor>{transpose2d(g)}; });
}

inline Tensor reshape(const Tensor& a, std::vector<int> shape) {
  if (Tensor::shape_numel(shape) != a.numel())
    detail::fail("reshape", "numel mismatch " + a.shape_str());
  std::vector<int> old_shape = a.shape();
  std::vector<double> out = stylemorph::detail::uninit_buffer(a.data().size());
  std::copy(a.data().begin(), a.data().end(), out.begin());
  return detail::make_op("reshape", std::move(shape), std::move(out), {a},
                         [old_shape](const Tensor& g) {
                           return std::vector<Tensor>{reshape(g, old_shape)};
                         });
}

// ===================== convolution plumbing =====================

namespace detail {

inline int conv_out_extent(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

// Raw unfold of [N,C,H,W] into receptive-field rows [(N*OH*OW), (C*kh*kw)].
// Out-of-bounds taps read as zero (zero padding).
inline std::vector<double> unfold_fill(const Tensor& x, int kh, int kw, int stride, int pad) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = conv_out_extent(h, kh, stride, pad);
  const int ow = conv_out_extent(w, kw, stride, pad);
  const int patch = c * kh * kw;
  std::vector<double> out =
      stylemorph::detail::zero_buffer(static_cast<size_t>(n) * oh * ow * patch);
  const double* px = x.ptr();
  size_t r = 0;
  for (int in = 0; in < n; ++in)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j, ++r) {
        double* row = out.data() + r * patch;
        for (int ic = 0; ic < c; ++ic) {
          const double* plane = px + (static_cast<size_t>(in) * c + ic) * h * w;
          for (int ki = 0; ki < kh; ++ki) {
            int src_i = i * stride - pad + ki;
            if (src_i < 0 || src_i >= h) continue;
            for (int kj = 0; kj < kw; ++kj) {
              int src_j = j * stride - pad + kj;
              if (src_j < 0 || src_j >= w) continue;
              row[(ic * kh + ki) * kw + kj] = plane[static_cast<size_t>(src_i) * w + src_j];
            }
          }
        }
      }
  return out;
}

}  // namespace detail

// Unfolds [N,C,H,W] into rows of receptive fields: [(N*OH*OW), (C*kh*kw)].
inline Tensor im2col(const Tensor& x, int kh, int kw, int stride, int pad) {
  detail::need_ndim("im2col", x, 4);
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const int oh = detail::conv_out_extent(h, kh, stride, pad);
  const int ow = detail::conv_out_extent(w, kw, stride, pad);
  if (oh <= 0 || ow <= 0) detail::fail("im2col", "kernel larger than padded input");
  const int patch = x.dim(1) * kh * kw;
  std::vector<int> img_shape = x.shape();
  return detail::make_op("im2col", {n * oh * ow, patch},
                         detail::unfold_fill(x, kh, kw, stride, pad), {x},
                         [img_shape, kh, kw, stride, pad](const Tensor& g) {
                           return std::vector<Tensor>{col2im(g, img_shape, kh, kw, stride, pad)};
                         });
}

// Adjoint of im2col: scatter-adds rows back into image layout.
inline Tensor col2im(const Tensor& cols, std::vector<int> img_shape, int kh, int kw, int stride,
                     int pad) {
  detail::need_ndim("col2im", cols, 2);
  if (img_shape.size() != 4) detail::fail("col2im", "img_shape must be 4-d");
  const int n = img_shape[0], c = img_shape[1], h = img_shape[2], w = img_shape[3];
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (w + 2 * pad - kw) / stride + 1;
  const int patch = c * kh * kw;
  if (cols.dim(0) != n * oh * ow || cols.dim(1) != patch)
    detail::fail("col2im", "cols shape " + cols.shape_str() + " does not match image");
  std::vector<double> out = stylemorph::detail::zero_buffer(static_cast<size_t>(Tensor::shape_numel(img_shape)));
  const double* pc = cols.ptr();
  size_t r = 0;
  for (int in = 0; in < n; ++in)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j, ++r) {
        const double* row = pc + r * patch;
        for (int ic = 0; ic < c; ++ic) {
          double* plane = out.data() + (static_cast<size_t>(in) * c + ic) * h * w;
          for (int ki = 0; ki < kh; ++ki) {
            int dst_i = i * stride - pad + ki;
            if (dst_i < 0 || dst_i >= h) continue;
            for (int kj = 0; kj < kw; ++kj) {
              int dst_j = j * stride - pad + kj;
              if (dst_j < 0 || dst_j >= w) continue;
              plane[static_cast<size_t>(dst_i) * w + dst_j] += row[(ic * kh + ki) * kw + kj];
            }
          }
        }
      }
  return detail::make_op("col2im", std::move(img_shape), std::move(out), {cols},
                         [kh, kw, stride, pad](const Tensor& g) {
                           return std::vector<Tensor>{im2col(g, kh, kw, stride, pad)};
                         });
}

// Permutes [(N*H*W), C] rows into [N,C,H,W]; inverse of nchw2rows.
inline Tensor rows2nchw(const Tensor& rows, int n, int c, int h, int w) {
  detail::need_ndim("rows2nchw", rows, 2);
  if (rows.dim(0) != n * h * w || rows.dim(1) != c)
    detail::fail("rows2nchw", "rows shape " + rows.shape_str() + " does not match target");
  std::vector<double> out = stylemorph::detail::uninit_buffer(static_cast<size_t>(n) * c * h * w);
  const double* p = rows.ptr();
  for (int in = 0; in < n; ++in)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const double* row = p + (static_cast<size_t>(in) * h * w + static_cast<size_t>(i) * w + j) * c;
        for (int ic = 0; ic < c; ++ic)
          out[((static_cast<size_t>(in) * c + ic) * h + i) * w + j] = row[ic];
      }
  return detail::make_op("rows2nchw", {n, c, h, w}, std::move(out), {rows},
                         [](const Tensor& g) { return std::vector<Tensor>{nchw2rows(g)}; });
}

inline Tensor nchw2rows(const Tensor& x) {
  detail::need_ndim("nchw2rows", x, 4);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<double> out = stylemorph::detail::uninit_buffer(static_cast<size_t>(n) * c * h * w);
  const double* p = x.ptr();
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          out[(static_cast<size_t>(in) * h * w + static_cast<size_t>(i) * w + j) * c + ic] =
              p[((static_cast<size_t>(in) * c + ic) * h + i) * w + j];
  return detail::make_op("nchw2rows", {n * h * w, c}, std::move(out), {x},
                         [n, c, h, w](const Tensor& g) {
                           return std::vector<Tensor>{rows2nchw(g, n, c, h, w)};
                         });
}

// ===================== resampling =====================

inline Tensor avgpool2(const Tensor& x) {
  detail::need_ndim("avgpool2", x, 4);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) detail::fail("avgpool2", "spatial dims must be even, got " + x.shape_str());
  const int oh = h / 2, ow = w / 2;
  std::vector<double> out = stylemorph::detail::uninit_buffer(static_cast<size_t>(n) * c * oh * ow);
  const double* p = x.ptr();
  size_t o = 0;
  for (int nc = 0; nc < n * c; ++nc) {
    const double* plane = p + static_cast<size_t>(nc) * h * w;
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j, ++o) {
        const double* q = plane + static_cast<size_t>(2 * i) * w + 2 * j;
        out[o] = 0.25 * (q[0] + q[1] + q[w] + q[w + 1]);
      }
  }
  return detail::make_op("avgpool2", {n, c, oh, ow}, std::move(out), {x}, [](const Tensor& g) {
    return std::vector<Tensor>{mul_scalar(upsample2(g), 0.25)};
  });
}

inline Tensor upsample2(const Tensor& x) {
  detail::need_ndim("upsample2", x, 4);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = h * 2, ow = w * 2;
  std::vector<double> out = stylemorph::detail::uninit_buffer(static_cast<size_t>(n) * c * oh * ow);
  const double* p = x.ptr();
  for (int nc = 0; nc < n * c; ++nc) {
    const double* plane = p + static_cast<size_t>(nc) * h * w;
    double* oplane = out.data() + static_cast<size_t>(nc) * oh * ow;
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j)
        oplane[static_cast<size_t>(i) * ow + j] = plane[static_cast<size_t>(i / 2) * w + j / 2];
  }
  return detail::make_op("upsample2", {n, c, oh, ow}, std::move(out), {x}, [](const Tensor& g) {
    return std::vector<Tensor>{mul_scalar(avgpool2(g), 4.0)};
  });
}

// ===================== reductions / broadcasts =====================

inline Tensor sum_hw(const Tensor& x) {
  detail::need_ndim("sum_hw", x, 4);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<double> out = stylemorph::detail::zero_buffer(static_cast<size_t>(n) * c);
  const double* p = x.ptr();
  for (int nc = 0; nc < n * c; ++nc) {
    double s = 0.0;
    const double* plane = p + static_cast<size_t>(nc) * h * w;
    for (int i = 0; i < h * w; ++i) s += plane[i];
    out[static_cast<size_t>(nc)] = s;
  }
  return detail::make_op("sum_hw", {n, c}, std::move(out), {x}, [h, w](const Tensor& g) {
    return std::vector<Tensor>{bcast_nc(g, h, w)};
  });
}

inline Tensor bcast_nc(const Tensor& s, int h, int w) {
  detail::need_ndim("bcast_nc", s, 2);
  const int n = s.dim(0), c = s.dim(1);
  std::vector<double> out = stylemorph::detail::uninit_buffer(static_cast<size_t>(n) * c * h * w);
  const double* p = s.ptr();
  for (int nc = 0; nc < n * c; ++nc)
    std::fill_n(out.data() + static_cast<size_t>(nc) * h * w, static_cast<size_t>(h) * w,
                p[static_cast<size_t>(nc)]);
  return detail::make_op("bcast_nc", {n, c, h, w}, std::move(out), {s},
                         [](const Tensor& g) { return std::vector<Tensor>{sum_hw(g)}; });
}

inline Tensor sum0(const Tensor& x) {
  detail::need_ndim("sum0", x, 2);
  const int n = x.dim(0), c = x.dim(1);
  std::vector<double> out = stylemorph::detail::zero_buffer(static_cast<size_t>(c));
  const double* p = x.ptr();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(j)] += p[static_cast<size_t>(i) * c + j];
  return detail::make_op("sum0", {c}, std::move(out), {x}, [n](const Tensor& g) {
    return std::vector<Tensor>{bcast0(g, n)};
  });
}

inline Tensor bcast0(const Tensor& v, int n) {
  detail::need_ndim("bcast0", v, 1);
  const int c = v.dim(0);
  std::vector<double> out = stylemorph::detail::uninit_buffer(static_cast<size_t>(n) * c);
  for (int i = 0; i < n; ++i)
    std::copy_n(v.ptr(), static_cast<size_t>(c), out.data() + static_cast<size_t>(i) * c);
  return detail::make_op("bcast0", {n, c}, std::move(out), {v},
                         [](const Tensor& g) { return std::vector<Tensor>{sum0(g)}; });
}

inline Tensor sum1(const Tensor& x) {
  detail::need_ndim("sum1", x, 2);
  const int n = x.dim(0), d = x.dim(1);
  std::vector<double> out = stylemorph::detail::zero_buffer(static_cast<size_t>(n));
  const double* p = x.ptr();
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += p[static_cast<size_t>(i) * d + j];
    out[static_cast<size_t>(i)] = s;
  }
  return detail::make_op("sum1", {n}, std::move(out), {x}, [d](const Tensor& g) {
    return std::vector<Tensor>{bcast1(g, d)};
  });
}

inline Tensor bcast1(const Tensor& v, int d) {
  detail::need_ndim("bcast1", v, 1);
  const int n = v.dim(0);
  std::vector<double> out = stylemorph::detail::uninit_buffer(static_cast<size_t>(n) * d);
  const double* p = v.ptr();
  for (int i = 0; i < n; ++i)
    std::fill_n(out.data() + static_cast<size_t>(i) * d, static_cast<size_t>(d),
                p[static_cast<size_t>(i)]);
  return detail::make_op("bcast1", {n, d}, std::move(out), {v},
                         [](const Tensor& g) { return std::vector<Tensor>{sum1(g)}; });
}

// ===================== concatenation / slicing =====================

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  detail::need_ndim("concat_cols", a, 2);
  detail::need_ndim("concat_cols", b, 2);
  if (a.dim(0) != b.dim(0))
    detail::fail("concat_cols", "row mismatch " + a.shape_str() + " vs " + b.shape_str());
  const int n = a.dim(0), da = a.dim(1), db = b.dim(1);
  std::vector<double> out = stylemorph::detail::uninit_buffer(static_cast<size_t>(n) * (da + db));
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.ptr() + static_cast<size_t>(i) * da, static_cast<size_t>(da),
                out.data() + static_cast<size_t>(i) * (da + db));
    std::copy_n(b.ptr() + static_cast<size_t>(i) * db, static_cast<size_t>(db),
                out.data() + static_cast<size_t>(i) * (da + db) + da);
  }
  return detail::make_op("concat_cols", {n, da + db}, std::move(out), {a, b},
                         [da, db](const Tensor& g) {
                           return std::vector<Tensor>{slice_cols(g, 0, da), slice_cols(g, da, db)};
                         });
}

inline Tensor slice_cols(const Tensor& x, int off, int len) {
  detail::need_ndim("slice_cols", x, 2);
  const int n = x.dim(0), d = x.dim(1);
  if (off < 0 || len <= 0 || off + len > d) detail::fail("slice_cols", "range out of bounds");
  std::vector<double> out = stylemorph::detail::uninit_buffer(static_cast<size_t>(n) * len);
  for (int i = 0; i < n; ++i)
    std::copy_n(x.ptr() + static_cast<size_t>(i) * d + off, static_cast<size_t>(len),
                out.data() + static_cast<size_t>(i) * len);
  return detail::make_op("slice_cols", {n, len}, std::move(out), {x},
                         [n, d, off, len](const Tensor& g) {
                           Tensor dx = g;
                           if (off > 0) dx = concat_cols(Tensor::zeros({n, off}), dx);
                           if (off + len < d) dx = concat_cols(dx, Tensor::zeros({n, d - off - len}));
                           return std::vector<Tensor>{dx};
                         });
}

inline Tensor concat_c(const Tensor& a, const Tensor& b) {
  detail::need_ndim("concat_c", a, 4);
  detail::need_ndim("concat_c", b, 4);
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    detail::fail("concat_c", "shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
  const size_t plane = static_cast<size_t>(h) * w;
  std::vector<double> out = stylemorph::detail::uninit_buffer(static_cast<size_t>(n) * (ca + cb) * plane);
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.ptr() + static_cast<size_t>(i) * ca * plane, static_cast<size_t>(ca) * plane,
                out.data() + static_cast<size_t>(i) * (ca + cb) * plane);
    std::copy_n(b.ptr() + static_cast<size_t>(i) * cb * plane, static_cast<size_t>(cb) * plane,
                out.data() + static_cast<size_t>(i) * (ca + cb) * plane + ca * plane);
  }
  return detail::make_op("concat_c", {n, ca + cb, h, w}, std::move(out), {a, b},
                         [ca, cb](const Tensor& g) {
                           return std::vector<Tensor>{slice_c(g, 0, ca), slice_c(g, ca, cb)};
                         });
}

inline Tensor slice_c(const Tensor& x, int off, int len) {
  detail::need_ndim("slice_c", x, 4);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (off < 0 || len <= 0 || off + len > c) detail::fail("slice_c", "range out of bounds");
  const size_t plane = static_cast<size_t>(h) * w;
  std::vector<double> out = stylemorph::detail::uninit_buffer(static_cast<size_t>(n) * len * plane);
  for (int i = 0; i < n; ++i)
    std::copy_n(x.ptr() + (static_cast<size_t>(i) * c + off) * plane,
                static_cast<size_t>(len) * plane, out.data() + static_cast<size_t>(i) * len * plane);
  return detail::make_op("slice_c", {n, len, h, w}, std::move(out), {x},
                         [n, c, h, w, off, len](const Tensor& g) {
                           Tensor dx = g;
                           if (off > 0) dx = concat_c(Tensor::zeros({n, off, h, w}), dx);
                           if (off + len < c)
                             dx = concat_c(dx, Tensor::zeros({n, c - off - len, h, w}));
                           return std::vector<Tensor>{dx};
                         });
}

// ===================== composites =====================

inline Tensor div(const Tensor& a, const Tensor& b) { return mul(a, recip(b)); }
inline Tensor square(const Tensor& a) { return mul(a, a); }
inline Tensor rsqrt(const Tensor& a) { return recip(sqrt(a)); }

inline Tensor mean(const Tensor& a) {
  return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// x:[N,in], weight:[out,in], bias:[out] -> [N,out]
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::need_ndim("linear", x, 2);
  detail::need_ndim("linear", weight, 2);
  detail::need_ndim("linear", bias, 1);
  if (x.dim(1) != weight.dim(1) || weight.dim(0) != bias.dim(0))
    detail::fail("linear", "incompatible shapes " + x.shape_str() + ", " + weight.shape_str());
  return add(matmul_nt(x, weight), bcast0(bias, x.dim(0)));
}

// x:[N,C,H,W], weight:[OC,C,kh,kw], optional bias:[OC]. One fused node: the
// graph keeps x rather than its unfolded copy, which is kh*kw times larger.
// The backward recomputes the unfold and treats it as a constant of the
// forward pass in the weight-gradient path; the input-gradient path is built
// from recorded ops, so gradients of gradients with respect to the input
// (the only second-order use here) still work.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride,
                     int pad) {
  detail::need_ndim("conv2d", x, 4);
  detail::need_ndim("conv2d", weight, 4);
  if (x.dim(1) != weight.dim(1))
    detail::fail("conv2d", "channel mismatch " + x.shape_str() + " vs " + weight.shape_str());
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != weight.dim(0)))
    detail::fail("conv2d", "bias shape " + bias.shape_str() + " does not match out channels");
  const int n = x.dim(0), oc = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  const int oh = detail::conv_out_extent(x.dim(2), kh, stride, pad);
  const int ow = detail::conv_out_extent(x.dim(3), kw, stride, pad);
  if (oh <= 0 || ow <= 0) detail::fail("conv2d", "kernel larger than padded input");
  const int patch = x.dim(1) * kh * kw;
  const int nrows = n * oh * ow;

  std::vector<double> cols = detail::unfold_fill(x, kh, kw, stride, pad);
  std::vector<double> wt = detail::raw_transpose(weight.ptr(), oc, patch);  // [patch, oc]
  std::vector<double> rows = stylemorph::detail::uninit_buffer(static_cast<size_t>(nrows) * oc);
  detail::gemm_strided(cols.data(), patch, 1, wt.data(), rows.data(), nrows, patch, oc);
  stylemorph::detail::buffer_pool().release(std::move(wt));
  stylemorph::detail::buffer_pool().release(std::move(cols));

  // Bias add and row->NCHW permutation in one pass.
  std::vector<double> out =
      stylemorph::detail::uninit_buffer(static_cast<size_t>(n) * oc * oh * ow);
  const double* pb = bias.defined() ? bias.ptr() : nullptr;
  for (int in = 0; in < n; ++in)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        const double* row =
            rows.data() + (static_cast<size_t>(in) * oh * ow + static_cast<size_t>(i) * ow + j) * oc;
        for (int ic = 0; ic < oc; ++ic)
          out[((static_cast<size_t>(in) * oc + ic) * oh + i) * ow + j] =
              pb ? row[ic] + pb[ic] : row[ic];
      }
  stylemorph::detail::buffer_pool().release(std::move(rows));

  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  auto backward = [x, weight, kh, kw, stride, pad, patch, nrows, has_bias](
                      const Tensor& g, const std::vector<char>& need) {
    Tensor g_rows = nchw2rows(g);
    Tensor dx, dw;
    if (need[0]) {
      Tensor wmat = reshape(weight, {weight.dim(0), patch});
      dx = col2im(matmul(g_rows, wmat), x.shape(), kh, kw, stride, pad);
    }
    if (need[1]) {
      Tensor cols =
          Tensor::from_data({nrows, patch}, detail::unfold_fill(x, kh, kw, stride, pad));
      dw = reshape(matmul_tn(g_rows, cols), weight.shape());
    }
    std::vector<Tensor> grads{dx, dw};
    if (has_bias) grads.push_back(need[2] ? sum0(g_rows) : Tensor{});
    return grads;
  };
  return detail::make_op("conv2d", {n, oc, oh, ow}, std::move(out), std::move(inputs),
                         std::move(backward));
}

// Per-sample, per-channel normalization over spatial positions (no affine).
inline Tensor instance_norm(const Tensor& x, double eps = 1e-5) {
  detail::need_ndim("instance_norm", x, 4);
  const int h = x.dim(2), w = x.dim(3);
  const double inv_hw = 1.0 / (static_cast<double>(h) * w);
  Tensor mu = mul_scalar(sum_hw(x), inv_hw);
  Tensor xc = sub(x, bcast_nc(mu, h, w));
  Tensor var = mul_scalar(sum_hw(square(xc)), inv_hw);
  Tensor inv_std = rsqrt(add_scalar(var, eps));
  return mul(xc, bcast_nc(inv_std, h, w));
}

}  // namespace stylemorph::ops
