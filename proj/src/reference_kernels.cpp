// SPDX-License-Identifier: Apache-2.0
// Serial reference versions of the kernels in kernels.cpp. Written for
// readability, not speed: textbook loop order, no blocking, no pragmas.
#include <cmath>
#include <vector>

#include "dvp/kernels.hpp"

namespace dvp::reference {

void matmul(std::span<const double> a, std::span<const double> b,
            std::span<double> c, std::size_t m, std::size_t k, std::size_t p,
            bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < p; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += a[i * k + t] * b[t * p + j];
      c[i * p + j] = accumulate ? c[i * p + j] + acc : acc;
    }
  }
}

void matmul_nt(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < p; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += a[i * k + t] * b[j * k + t];
      c[i * p + j] += acc;
    }
  }
}

void matmul_tn(std::span<const double> a, std::span<const double> b,
               std::span<double> c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t t = 0; t < k; ++t) {
    for (std::size_t j = 0; j < p; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < m; ++i) acc += a[i * k + t] * b[i * p + j];
      c[t * p + j] += acc;
    }
  }
}

void softmax_rows(std::span<const double> x, std::span<double> y,
                  std::size_t m, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    double mx = x[i * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x[i * k + j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(x[i * k + j] - mx);
    for (std::size_t j = 0; j < k; ++j) y[i * k + j] = std::exp(x[i * k + j] - mx) / sum;
  }
}

void softmax_rows_backward(std::span<const double> y, std::span<const double> dy,
                           std::span<double> dx, std::size_t m, std::size_t k) {
  // Full Jacobian: dy_j/dx_l = y_j (delta_jl - y_l).
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t l = 0; l < k; ++l) {
      double acc = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const double jac = y[i * k + j] * ((j == l ? 1.0 : 0.0) - y[i * k + l]);
        acc += dy[i * k + j] * jac;
      }
      dx[i * k + l] += acc;
    }
  }
}

void gelu(std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu_scalar(x[i]);
}

void gelu_backward(std::span<const double> x, std::span<const double> dy,
                   std::span<double> dx) {
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] += dy[i] * gelu_derivative(x[i]);
}

void layer_norm(std::span<const double> x, std::span<const double> gain,
                std::span<const double> bias, std::span<double> y,
                std::span<double> mean, std::span<double> rstd, std::size_t m,
                std::size_t d, double eps) {
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += x[i * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (x[i * d + j] - mu) * (x[i * d + j] - mu);
    var /= static_cast<double>(d);
    mean[i] = mu;
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      y[i * d + j] = (x[i * d + j] - mu) * rstd[i] * gain[j] + bias[j];
    }
  }
}

void layer_norm_backward(std::span<const double> x, std::span<const double> gain,
                         std::span<const double> dy, std::span<const double> mean,
                         std::span<const double> rstd, std::span<double> dx,
                         std::span<double> dgain, std::span<double> dbias,
                         std::size_t m, std::size_t d) {
  const double n = static_cast<double>(d);
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> xhat(d);
    std::vector<double> g(d);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[j] = (x[i * d + j] - mean[i]) * rstd[i];
      g[j] = dy[i * d + j] * gain[j];
      if (!dgain.empty()) dgain[j] += dy[i * d + j] * xhat[j];
      if (!dbias.empty()) dbias[j] += dy[i * d + j];
    }
    if (dx.empty()) continue;
    double mean_g = 0.0;
    double mean_gx = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      mean_g += g[j] / n;
      mean_gx += g[j] * xhat[j] / n;
    }
    for (std::size_t j = 0; j < d; ++j) {
      dx[i * d + j] += rstd[i] * (g[j] - mean_g - xhat[j] * mean_gx);
    }
  }
}

void attention(std::span<const double> q, std::span<const double> k,
               std::span<const double> v, std::span<double> out,
               std::span<double> probs, const AttentionDims& dims) {
  const std::size_t d = dims.width;
  const std::size_t dh = dims.head_width();
  for (std::size_t b = 0; b < dims.batch; ++b) {
    for (std::size_t h = 0; h < dims.heads; ++h) {
      const std::size_t base = (b * dims.heads + h) * dims.q_len * dims.kv_len;
      std::vector<double> scores(dims.q_len * dims.kv_len);
      for (std::size_t i = 0; i < dims.q_len; ++i) {
        for (std::size_t j = 0; j < dims.kv_len; ++j) {
          double acc = 0.0;
          for (std::size_t t = 0; t < dh; ++t) {
            acc += q[(b * dims.q_len + i) * d + h * dh + t] *
                   k[(b * dims.kv_len + j) * d + h * dh + t];
          }
          scores[i * dims.kv_len + j] = acc * dims.scale;
        }
      }
      softmax_rows(scores, probs.subspan(base, scores.size()), dims.q_len, dims.kv_len);
      for (std::size_t i = 0; i < dims.q_len; ++i) {
        for (std::size_t t = 0; t < dh; ++t) {
          double acc = 0.0;
          for (std::size_t j = 0; j < dims.kv_len; ++j) {
            acc += probs[base + i * dims.kv_len + j] * v[(b * dims.kv_len + j) * d + h * dh + t];
          }
          out[(b * dims.q_len + i) * d + h * dh + t] = acc;
        }
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
  for (std::size_t b = 0; b < dims.batch; ++b) {
    for (std::size_t h = 0; h < dims.heads; ++h) {
      const std::size_t base = (b * dims.heads + h) * sq * sk;
      auto P = probs.subspan(base, sq * sk);
      std::vector<double> dP(sq * sk, 0.0);
      for (std::size_t i = 0; i < sq; ++i) {
        for (std::size_t j = 0; j < sk; ++j) {
          for (std::size_t t = 0; t < dh; ++t) {
            dP[i * sk + j] += dout[(b * sq + i) * d + h * dh + t] * v[(b * sk + j) * d + h * dh + t];
          }
        }
      }
      std::vector<double> dS(sq * sk, 0.0);
      softmax_rows_backward(P, dP, dS, sq, sk);
      for (std::size_t i = 0; i < sq; ++i) {
        for (std::size_t j = 0; j < sk; ++j) {
          for (std::size_t t = 0; t < dh; ++t) {
            const std::size_t qi = (b * sq + i) * d + h * dh + t;
            const std::size_t kj = (b * sk + j) * d + h * dh + t;
            if (!dq.empty()) dq[qi] += dims.scale * dS[i * sk + j] * k[kj];
            if (!dk.empty()) dk[kj] += dims.scale * dS[i * sk + j] * q[qi];
            if (!dv.empty()) dv[kj] += P[i * sk + j] * dout[qi];
          }
        }
      }
    }
  }
}

}  // namespace dvp::reference
