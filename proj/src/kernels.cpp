// SPDX-License-Identifier: Apache-2.0
#include "dvp/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dvp {

double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
}

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
  return cdf + x * pdf;
}

namespace kernels {
namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1u << 15;

using Index = long long;

}  // namespace

namespace {

constexpr std::size_t kTileRows = 4;
constexpr std::size_t kTileCols = 16;

/// C[rows x cols] (+)= A[rows x k] * B[k x cols] for one register tile, where
/// A has row stride lda and B and C have row stride ldb and ldc. The sum over
/// t runs in order so each entry rounds exactly like the naive loop.
template <std::size_t R, std::size_t P>
inline void tile(const double* A, std::size_t lda, const double* B, std::size_t ldb, double* C,
                 std::size_t ldc, std::size_t k, bool accumulate) {
  double acc[R][P];
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t j = 0; j < P; ++j) acc[r][j] = accumulate ? C[r * ldc + j] : 0.0;
  }
  for (std::size_t t = 0; t < k; ++t) {
    const double* brow = B + t * ldb;
    for (std::size_t r = 0; r < R; ++r) {
      const double av = A[r * lda + t];
#pragma omp simd
      for (std::size_t j = 0; j < P; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t j = 0; j < P; ++j) C[r * ldc + j] = acc[r][j];
  }
}

/// Edge tiles of arbitrary size, same summation order as tile().
void edge(const double* A, std::size_t lda, const double* B, std::size_t ldb, double* C,
          std::size_t ldc, std::size_t rows, std::size_t cols, std::size_t k, bool accumulate) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* crow = C + r * ldc;
    if (!accumulate) std::fill(crow, crow + cols, 0.0);
    for (std::size_t t = 0; t < k; ++t) {
      const double av = A[r * lda + t];
      const double* brow = B + t * ldb;
      for (std::size_t j = 0; j < cols; ++j) crow[j] += av * brow[j];
    }
  }
}

void blocked(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
             std::size_t p, bool accumulate) {
  const Index row_tiles = static_cast<Index>((m + kTileRows - 1) / kTileRows);
#pragma omp parallel for schedule(static) if (m * k * p >= kParallelWork)
  for (Index ti = 0; ti < row_tiles; ++ti) {
    const std::size_t i = static_cast<std::size_t>(ti) * kTileRows;
    const std::size_t rows = std::min(kTileRows, m - i);
    for (std::size_t j = 0; j < p; j += kTileCols) {
      const std::size_t cols = std::min(kTileCols, p - j);
      if (rows == kTileRows && cols == kTileCols) {
        tile<kTileRows, kTileCols>(A + i * k, k, B + j, p, C + i * p + j, p, k, accumulate);
      } else {
        edge(A + i * k, k, B + j, p, C + i * p + j, p, rows, cols, k, accumulate);
      }
    }
  }
}

void transpose(const double* x, std::size_t rows, std::size_t cols, std::vector<double>& out) {
  out.resize(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = x[r * cols + c];
  }
}

}  // namespace

void matmul(std::span<const double> a, std::span<const double> b,
            std::span<double> c, std::size_t m, std::size_t k, std::size_t p,
            bool accumulate) {
  blocked(a.data(), b.data(), c.data(), m, k, p, accumulate);
}

void matmul_nt(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t m, std::size_t k, std::size_t p) {
  thread_local std::vector<double> bt;
  transpose(b.data(), p, k, bt);
  blocked(a.data(), bt.data(), c.data(), m, k, p, true);
}

void matmul_tn(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t m, std::size_t k, std::size_t p) {
  thread_local std::vector<double> at;
  transpose(a.data(), m, k, at);
  blocked(at.data(), b.data(), c.data(), k, m, p, true);
}

void softmax_rows(std::span<const double> x, std::span<double> y,
                  std::size_t m, std::size_t k) {
#pragma omp parallel for schedule(static) if (m * k >= kParallelWork)
  for (Index i = 0; i < static_cast<Index>(m); ++i) {
    const double* xr = x.data() + i * k;
    double* yr = y.data() + i * k;
    const double mx = *std::max_element(xr, xr + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < k; ++j) yr[j] *= inv;
  }
}

void softmax_rows_backward(std::span<const double> y, std::span<const double> dy,
                           std::span<double> dx, std::size_t m, std::size_t k) {
#pragma omp parallel for schedule(static) if (m * k >= kParallelWork)
  for (Index i = 0; i < static_cast<Index>(m); ++i) {
    const double* yr = y.data() + i * k;
    const double* gr = dy.data() + i * k;
    double dot = 0.0;
    for (std::size_t j = 0; j < k; ++j) dot += yr[j] * gr[j];
    double* out = dx.data() + i * k;
    for (std::size_t j = 0; j < k; ++j) out[j] += yr[j] * (gr[j] - dot);
  }
}

void gelu(std::span<const double> x, std::span<double> y) {
  const std::size_t n = x.size();
#pragma omp parallel for schedule(static) if (n >= kParallelWork)
  for (Index i = 0; i < static_cast<Index>(n); ++i) y[i] = gelu_scalar(x[i]);
}

void gelu_backward(std::span<const double> x, std::span<const double> dy,
                   std::span<double> dx) {
  const std::size_t n = x.size();
#pragma omp parallel for schedule(static) if (n >= kParallelWork)
  for (Index i = 0; i < static_cast<Index>(n); ++i) dx[i] += dy[i] * gelu_derivative(x[i]);
}

void layer_norm(std::span<const double> x, std::span<const double> gain,
                std::span<const double> bias, std::span<double> y,
                std::span<double> mean, std::span<double> rstd, std::size_t m,
                std::size_t d, double eps) {
#pragma omp parallel for schedule(static) if (m * d >= kParallelWork)
  for (Index i = 0; i < static_cast<Index>(m); ++i) {
    const double* xr = x.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    mean[i] = mu;
    rstd[i] = rs;
    double* yr = y.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) yr[j] = (xr[j] - mu) * rs * gain[j] + bias[j];
  }
}

void layer_norm_backward(std::span<const double> x, std::span<const double> gain,
                         std::span<const double> dy, std::span<const double> mean,
                         std::span<const double> rstd, std::span<double> dx,
                         std::span<double> dgain, std::span<double> dbias,
                         std::size_t m, std::size_t d) {
  // Parameter gradients reduce over rows; keep that loop serial so the
  // summation order (and therefore the result) never depends on threads.
  if (!dgain.empty() || !dbias.empty()) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* xr = x.data() + i * d;
      const double* gr = dy.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) {
        const double xhat = (xr[j] - mean[i]) * rstd[i];
        if (!dgain.empty()) dgain[j] += gr[j] * xhat;
        if (!dbias.empty()) dbias[j] += gr[j];
      }
    }
  }
  if (dx.empty()) return;
#pragma omp parallel for schedule(static) if (m * d >= kParallelWork)
  for (Index i = 0; i < static_cast<Index>(m); ++i) {
    const double* xr = x.data() + i * d;
    const double* gr = dy.data() + i * d;
    double sum_g = 0.0;
    double sum_gx = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double g = gr[j] * gain[j];
      sum_g += g;
      sum_gx += g * (xr[j] - mean[i]) * rstd[i];
    }
    const double inv_d = 1.0 / static_cast<double>(d);
    double* out = dx.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) {
      const double xhat = (xr[j] - mean[i]) * rstd[i];
      out[j] += rstd[i] * (gr[j] * gain[j] - inv_d * sum_g - xhat * inv_d * sum_gx);
    }
  }
}

void attention(std::span<const double> q, std::span<const double> k,
               std::span<const double> v, std::span<double> out,
               std::span<double> probs, const AttentionDims& dims) {
  const std::size_t d = dims.width;
  const std::size_t dh = dims.head_width();
  const std::size_t sq = dims.q_len;
  const std::size_t sk = dims.kv_len;
  const Index jobs = static_cast<Index>(dims.batch * dims.heads);
#pragma omp parallel for schedule(static) if (dims.batch * dims.heads * sq * sk * dh >= kParallelWork)
  for (Index job = 0; job < jobs; ++job) {
    const std::size_t b = static_cast<std::size_t>(job) / dims.heads;
    const std::size_t h = static_cast<std::size_t>(job) % dims.heads;
    double* p = probs.data() + static_cast<std::size_t>(job) * sq * sk;
    for (std::size_t i = 0; i < sq; ++i) {
      const double* qi = q.data() + (b * sq + i) * d + h * dh;
      double* pi = p + i * sk;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < sk; ++j) {
        const double* kj = k.data() + (b * sk + j) * d + h * dh;
        double acc = 0.0;
#pragma omp simd reduction(+ : acc)
        for (std::size_t t = 0; t < dh; ++t) acc += qi[t] * kj[t];
        pi[j] = acc * dims.scale;
        mx = std::max(mx, pi[j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < sk; ++j) {
        pi[j] = std::exp(pi[j] - mx);
        sum += pi[j];
      }
      const double inv = 1.0 / sum;
      for (std::size_t j = 0; j < sk; ++j) pi[j] *= inv;
      double* oi = out.data() + (b * sq + i) * d + h * dh;
      std::fill(oi, oi + dh, 0.0);
      for (std::size_t j = 0; j < sk; ++j) {
        const double* vj = v.data() + (b * sk + j) * d + h * dh;
        const double w = pi[j];
#pragma omp simd
        for (std::size_t t = 0; t < dh; ++t) oi[t] += w * vj[t];
      }
    }
  }
}

void attention_backward(std::span<const double> q, std::span<const double> k,
                        std::span<const double> v, std::span<const double> probs,
                        std::span<const double> dout, std::span<double> dq,
                        std::span<double> dk, std::span<double> dv,
                        const AttentionDims& dims) {
  const std::size_t d = dims.width;
  const std::size_t dh = dims.head_width();
  const std::size_t sq = dims.q_len;
  const std::size_t sk = dims.kv_len;
  const Index jobs = static_cast<Index>(dims.batch * dims.heads);
#pragma omp parallel for schedule(static) if (dims.batch * dims.heads * sq * sk * dh >= kParallelWork)
  for (Index job = 0; job < jobs; ++job) {
    const std::size_t b = static_cast<std::size_t>(job) / dims.heads;
    const std::size_t h = static_cast<std::size_t>(job) % dims.heads;
    const double* p = probs.data() + static_cast<std::size_t>(job) * sq * sk;
    std::vector<double> ds(sk);
    for (std::size_t i = 0; i < sq; ++i) {
      const double* pi = p + i * sk;
      const double* gi = dout.data() + (b * sq + i) * d + h * dh;
      double dot = 0.0;
      for (std::size_t j = 0; j < sk; ++j) {
        const double* vj = v.data() + (b * sk + j) * d + h * dh;
        double acc = 0.0;
#pragma omp simd reduction(+ : acc)
        for (std::size_t t = 0; t < dh; ++t) acc += gi[t] * vj[t];
        ds[j] = acc;
        dot += acc * pi[j];
        if (!dv.empty()) {
          double* dvj = dv.data() + (b * sk + j) * d + h * dh;
          const double w = pi[j];
#pragma omp simd
          for (std::size_t t = 0; t < dh; ++t) dvj[t] += w * gi[t];
        }
      }
      const double* qi = q.data() + (b * sq + i) * d + h * dh;
      double* dqi = dq.empty() ? nullptr : dq.data() + (b * sq + i) * d + h * dh;
      for (std::size_t j = 0; j < sk; ++j) {
        const double s = pi[j] * (ds[j] - dot) * dims.scale;
        if (s == 0.0) continue;
        const double* kj = k.data() + (b * sk + j) * d + h * dh;
        if (dqi) {
#pragma omp simd
          for (std::size_t t = 0; t < dh; ++t) dqi[t] += s * kj[t];
        }
        if (!dk.empty()) {
          double* dkj = dk.data() + (b * sk + j) * d + h * dh;
#pragma omp simd
          for (std::size_t t = 0; t < dh; ++t) dkj[t] += s * qi[t];
        }
      }
    }
  }
}

}  // namespace kernels
}  // namespace dvp
