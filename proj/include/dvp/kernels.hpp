// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense kernels used by the autograd tape.
//
// `dvp::kernels` holds the OpenMP versions used on the hot path.
// `dvp::reference` holds plain serial loops with identical signatures; the
// tests compare the two and the benchmark target times them side by side.
//
// All matrices are row-major. Functions whose last output is documented as
// "(+=)" accumulate into the output buffer instead of overwriting it.

#include <cstddef>
#include <span>

namespace dvp {

struct AttentionDims {
  std::size_t batch = 1;
  std::size_t q_len = 1;   // query rows per batch item
  std::size_t kv_len = 1;  // key/value rows per batch item
  std::size_t width = 1;   // model width, split evenly across heads
  std::size_t heads = 1;
  double scale = 1.0;

  std::size_t head_width() const { return width / heads; }
  std::size_t probs_size() const { return batch * heads * q_len * kv_len; }
};

namespace kernels {

/// c[m x p] = a[m x k] * b[k x p]; accumulates when `accumulate` is set.
void matmul(std::span<const double> a, std::span<const double> b,
            std::span<double> c, std::size_t m, std::size_t k, std::size_t p,
            bool accumulate = false);
/// c[m x p] (+=) a[m x k] * b[p x k]^T
void matmul_nt(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t m, std::size_t k, std::size_t p);
/// c[k x p] (+=) a[m x k]^T * b[m x p]
void matmul_tn(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t m, std::size_t k, std::size_t p);

void softmax_rows(std::span<const double> x, std::span<double> y,
                  std::size_t m, std::size_t k);
/// dx (+=) J_softmax^T dy, given the forward output y.
void softmax_rows_backward(std::span<const double> y, std::span<const double> dy,
                           std::span<double> dx, std::size_t m, std::size_t k);

void gelu(std::span<const double> x, std::span<double> y);
void gelu_backward(std::span<const double> x, std::span<const double> dy,
                   std::span<double> dx);

/// Row-wise normalization over the trailing width d. Saves per-row mean and
/// reciprocal standard deviation for the backward pass.
void layer_norm(std::span<const double> x, std::span<const double> gain,
                std::span<const double> bias, std::span<double> y,
                std::span<double> mean, std::span<double> rstd, std::size_t m,
                std::size_t d, double eps);
void layer_norm_backward(std::span<const double> x, std::span<const double> gain,
                         std::span<const double> dy, std::span<const double> mean,
                         std::span<const double> rstd, std::span<double> dx,
                         std::span<double> dgain, std::span<double> dbias,
                         std::size_t m, std::size_t d);

/// Multi-head scaled dot-product attention over `batch` independent
/// segments. Writes softmax probabilities to `probs`
/// (layout [batch][head][q_len][kv_len]).
void attention(std::span<const double> q, std::span<const double> k,
               std::span<const double> v, std::span<double> out,
               std::span<double> probs, const AttentionDims& dims);
/// dq, dk, dv (+=)
void attention_backward(std::span<const double> q, std::span<const double> k,
                        std::span<const double> v, std::span<const double> probs,
                        std::span<const double> dout, std::span<double> dq,
                        std::span<double> dk, std::span<double> dv,
                        const AttentionDims& dims);

}  // namespace kernels

namespace reference {

void matmul(std::span<const double> a, std::span<const double> b,
            std::span<double> c, std::size_t m, std::size_t k, std::size_t p,
            bool accumulate = false);
void matmul_nt(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t m, std::size_t k, std::size_t p);
void matmul_tn(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t m, std::size_t k, std::size_t p);
void softmax_rows(std::span<const double> x, std::span<double> y,
                  std::size_t m, std::size_t k);
void softmax_rows_backward(std::span<const double> y, std::span<const double> dy,
                           std::span<double> dx, std::size_t m, std::size_t k);
void gelu(std::span<const double> x, std::span<double> y);
void gelu_backward(std::span<const double> x, std::span<const double> dy,
                   std::span<double> dx);
void layer_norm(std::span<const double> x, std::span<const double> gain,
                std::span<const double> bias, std::span<double> y,
                std::span<double> mean, std::span<double> rstd, std::size_t m,
                std::size_t d, double eps);
void layer_norm_backward(std::span<const double> x, std::span<const double> gain,
                         std::span<const double> dy, std::span<const double> mean,
                         std::span<const double> rstd, std::span<double> dx,
                         std::span<double> dgain, std::span<double> dbias,
                         std::size_t m, std::size_t d);
void attention(std::span<const double> q, std::span<const double> k,
               std::span<const double> v, std::span<double> out,
               std::span<double> probs, const AttentionDims& dims);
void attention_backward(std::span<const double> q, std::span<const double> k,
                        std::span<const double> v, std::span<const double> probs,
                        std::span<const double> dout, std::span<double> dq,
                        std::span<double> dk, std::span<double> dv,
                        const AttentionDims& dims);

}  // namespace reference

/// Scalar helpers shared by both kernel families.
double gelu_scalar(double x);
double gelu_derivative(double x);

}  // namespace dvp
