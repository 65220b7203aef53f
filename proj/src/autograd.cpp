// SPDX-License-Identifier: Apache-2.0
#include "dvp/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace dvp {

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, grad_enabled_});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Tensor& tensor) {
  if (auto it = bound_.find(&tensor); it != bound_.end()) return Var(this, it->second);
  // The node keeps its own copy of the values so the tape stays valid even
  // if an optimizer touches the tensor before backward() runs.
  nodes_.push_back(
      Node{tensor.detached(), {}, {}, &tensor, grad_enabled_ && tensor.requires_grad()});
  const std::size_t id = nodes_.size() - 1;
  bound_.emplace(&tensor, id);
  param_order_.push_back(id);
  return Var(this, id);
}

Var Tape::record(Tensor value, std::span<const Var> parents, BackwardFn backward) {
  bool needs = false;
  for (const Var& p : parents) {
    if (p.tape() != this) throw Error("operation mixes variables from different tapes");
    needs = needs || nodes_[p.id()].needs_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : BackwardFn{},
                        nullptr, needs});
  return Var(this, nodes_.size() - 1);
}

std::span<double> Tape::grad_buffer(std::size_t id) {
  auto& g = nodes_[id].grad;
  if (g.empty()) g.assign(nodes_[id].value.size(), 0.0);
  return g;
}

void Tape::backward(Var root) {
  if (root.tape() != this) throw Error("backward() root belongs to another tape");
  if (nodes_[root.id()].value.size() != 1) {
    throw Error("backward() needs a scalar root, got " +
                shape_string(nodes_[root.id()].value.shape()));
  }
  for (auto& n : nodes_) n.grad.clear();
  visited_ = 0;
  if (!nodes_[root.id()].needs_grad) return;
  grad_buffer(root.id())[0] = 1.0;
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.grad.empty()) continue;
    ++visited_;
    if (n.backward) n.backward(*this, id);
  }
}

void Tape::accumulate_param_grads() {
  for (std::size_t id : param_order_) {
    Node& n = nodes_[id];
    if (n.needs_grad && !n.grad.empty()) n.param->accumulate_grad(n.grad);
  }
}

void Tape::for_each_param_grad(
    const std::function<void(Tensor&, std::span<const double>)>& visit) const {
  for (std::size_t id : param_order_) {
    const Node& n = nodes_[id];
    if (n.needs_grad && !n.grad.empty()) visit(*n.param, n.grad);
  }
}

namespace ad {
namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(what);
}

std::string shapes(const char* op, const Var& a, const Var& b) {
  return std::string(op) + ": incompatible shapes " + shape_string(a.value().shape()) +
         " and " + shape_string(b.value().shape());
}

Tensor like(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }

}  // namespace

Var matmul(Var a, Var b) {
  require(a.cols() == b.rows(), shapes("matmul", a, b));
  const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
  Tensor out = like(m, p);
  kernels::matmul(a.value().values(), b.value().values(), out.values(), m, k, p);
  const std::size_t ia = a.id(), ib = b.id();
  const Var parents[] = {a, b};
  return a.tape()->record(std::move(out), parents, [=](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.needs_grad(ia)) {
      kernels::matmul_nt(g, t.value(ib).values(), t.grad_buffer(ia), m, p, k);
    }
    if (t.needs_grad(ib)) {
      kernels::matmul_tn(t.value(ia).values(), g, t.grad_buffer(ib), m, k, p);
    }
  });
}

Var add(Var a, Var b) {
  require(a.value().shape() == b.value().shape(), shapes("add", a, b));
  Tensor out = a.value().detached();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  const Var parents[] = {a, b};
  return a.tape()->record(std::move(out), parents, [=](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    for (std::size_t id : {ia, ib}) {
      if (!t.needs_grad(id)) continue;
      auto dst = t.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
  });
}

Var add_bias(Var x, Var bias) {
  require(bias.value().size() == x.cols(), shapes("add_bias", x, bias));
  const std::size_t m = x.rows(), d = x.cols();
  Tensor out = x.value().detached();
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] += bias.value()[c];
  }
  const std::size_t ix = x.id(), ib = bias.id();
  const Var parents[] = {x, bias};
  return x.tape()->record(std::move(out), parents, [=](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.needs_grad(ix)) {
      auto dst = t.grad_buffer(ix);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
    if (t.needs_grad(ib)) {
      auto dst = t.grad_buffer(ib);
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < d; ++c) dst[c] += g[r * d + c];
      }
    }
  });
}

Var add_periodic(Var x, Var pattern) {
  require(pattern.cols() == x.cols() && x.rows() % pattern.rows() == 0,
          shapes("add_periodic", x, pattern));
  const std::size_t m = x.rows(), d = x.cols(), period = pattern.rows();
  Tensor out = x.value().detached();
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] += pattern.value()[(r % period) * d + c];
  }
  const std::size_t ix = x.id(), ip = pattern.id();
  const Var parents[] = {x, pattern};
  return x.tape()->record(std::move(out), parents, [=](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.needs_grad(ix)) {
      auto dst = t.grad_buffer(ix);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
    if (t.needs_grad(ip)) {
      auto dst = t.grad_buffer(ip);
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < d; ++c) dst[(r % period) * d + c] += g[r * d + c];
      }
    }
  });
}

Var repeat_rows(Var x, std::size_t times) {
  require(times >= 1, "repeat_rows: times must be positive");
  const std::size_t n = x.value().size();
  Tensor out = like(x.rows() * times, x.cols());
  for (std::size_t r = 0; r < times; ++r) {
    std::copy(x.value().values().begin(), x.value().values().end(), out.data() + r * n);
  }
  const std::size_t ix = x.id();
  const Var parents[] = {x};
  return x.tape()->record(std::move(out), parents, [=](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    auto dst = t.grad_buffer(ix);
    for (std::size_t r = 0; r < times; ++r) {
      for (std::size_t i = 0; i < n; ++i) dst[i] += g[r * n + i];
    }
  });
}

Var scale(Var x, double s) {
  Tensor out = x.value().detached();
  for (auto& v : out.values()) v *= s;
  const std::size_t ix = x.id();
  const Var parents[] = {x};
  return x.tape()->record(std::move(out), parents, [=](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    auto dst = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += s * g[i];
  });
}

Var gelu(Var x) {
  Tensor out = Tensor(x.value().shape());
  kernels::gelu(x.value().values(), out.values());
  const std::size_t ix = x.id();
  const Var parents[] = {x};
  return x.tape()->record(std::move(out), parents, [=](Tape& t, std::size_t self) {
    kernels::gelu_backward(t.value(ix).values(), t.grad(self), t.grad_buffer(ix));
  });
}

Var softmax_rows(Var x) {
  if (!x.value().all_finite()) throw Error("softmax_rows: input contains non-finite values");
  const std::size_t m = x.rows(), k = x.cols();
  Tensor out = Tensor(x.value().shape());
  kernels::softmax_rows(x.value().values(), out.values(), m, k);
  const std::size_t ix = x.id();
  const Var parents[] = {x};
  return x.tape()->record(std::move(out), parents, [=](Tape& t, std::size_t self) {
    kernels::softmax_rows_backward(t.value(self).values(), t.grad(self), t.grad_buffer(ix), m, k);
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const std::size_t m = x.rows(), d = x.cols();
  require(gain.value().size() == d && bias.value().size() == d,
          "layer_norm: gain/bias " + shape_string(gain.value().shape()) + "/" +
              shape_string(bias.value().shape()) + " do not match width of " +
              shape_string(x.value().shape()));
  require(eps > 0.0, "layer_norm: eps must be positive");
  Tensor out = Tensor(x.value().shape());
  auto stats = std::make_shared<std::vector<double>>(2 * m);
  std::span<double> mean(stats->data(), m), rstd(stats->data() + m, m);
  kernels::layer_norm(x.value().values(), gain.value().values(), bias.value().values(),
                      out.values(), mean, rstd, m, d, eps);
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  const Var parents[] = {x, gain, bias};
  return x.tape()->record(std::move(out), parents, [=](Tape& t, std::size_t self) {
    std::span<const double> mu(stats->data(), m), rs(stats->data() + m, m);
    kernels::layer_norm_backward(
        t.value(ix).values(), t.value(ig).values(), t.grad(self), mu, rs,
        t.needs_grad(ix) ? t.grad_buffer(ix) : std::span<double>{},
        t.needs_grad(ig) ? t.grad_buffer(ig) : std::span<double>{},
        t.needs_grad(ib) ? t.grad_buffer(ib) : std::span<double>{}, m, d);
  });
}

Var attention(Var q, Var k, Var v, const AttentionDims& dims, Tensor* probs_out) {
  require(dims.heads >= 1 && dims.width % dims.heads == 0,
          "attention: width " + std::to_string(dims.width) + " not divisible by " +
              std::to_string(dims.heads) + " heads");
  require(q.cols() == dims.width && q.rows() == dims.batch * dims.q_len,
          "attention: query shape " + shape_string(q.value().shape()) +
              " does not match batch*q_len x width");
  require(k.value().shape() == v.value().shape() && k.cols() == dims.width &&
              k.rows() == dims.batch * dims.kv_len,
          shapes("attention (key/value)", k, v));
  Tensor out = like(q.rows(), dims.width);
  auto probs = std::make_shared<std::vector<double>>(dims.probs_size());
  kernels::attention(q.value().values(), k.value().values(), v.value().values(),
                     out.values(), *probs, dims);
  if (probs_out) {
    *probs_out = Tensor({dims.batch * dims.heads * dims.q_len, dims.kv_len}, *probs);
  }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  const Var parents[] = {q, k, v};
  return q.tape()->record(std::move(out), parents, [=](Tape& t, std::size_t self) {
    kernels::attention_backward(
        t.value(iq).values(), t.value(ik).values(), t.value(iv).values(), *probs,
        t.grad(self), t.needs_grad(iq) ? t.grad_buffer(iq) : std::span<double>{},
        t.needs_grad(ik) ? t.grad_buffer(ik) : std::span<double>{},
        t.needs_grad(iv) ? t.grad_buffer(iv) : std::span<double>{}, dims);
  });
}

Var concat_segments(Var a, std::size_t a_len, Var b, std::size_t b_len, std::size_t batch) {
  require(a.cols() == b.cols() && a.rows() == a_len * batch && b.rows() == b_len * batch,
          shapes("concat_segments", a, b));
  const std::size_t d = a.cols(), seg = a_len + b_len;
  Tensor out = like(seg * batch, d);
  for (std::size_t s = 0; s < batch; ++s) {
    std::copy_n(a.value().data() + s * a_len * d, a_len * d, out.data() + s * seg * d);
    std::copy_n(b.value().data() + s * b_len * d, b_len * d, out.data() + (s * seg + a_len) * d);
  }
  const std::size_t ia = a.id(), ib = b.id();
  const Var parents[] = {a, b};
  return a.tape()->record(std::move(out), parents, [=](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.needs_grad(ia)) {
      auto dst = t.grad_buffer(ia);
      for (std::size_t s = 0; s < batch; ++s) {
        for (std::size_t i = 0; i < a_len * d; ++i) dst[s * a_len * d + i] += g[s * seg * d + i];
      }
    }
    if (t.needs_grad(ib)) {
      auto dst = t.grad_buffer(ib);
      for (std::size_t s = 0; s < batch; ++s) {
        for (std::size_t i = 0; i < b_len * d; ++i) {
          dst[s * b_len * d + i] += g[(s * seg + a_len) * d + i];
        }
      }
    }
  });
}

Var slice_segments(Var x, std::size_t seg_len, std::size_t begin, std::size_t count,
                   std::size_t batch) {
  require(x.rows() == seg_len * batch && begin + count <= seg_len && count >= 1,
          "slice_segments: cannot take rows [" + std::to_string(begin) + ", " +
              std::to_string(begin + count) + ") of segments of length " +
              std::to_string(seg_len) + " from " + shape_string(x.value().shape()));
  const std::size_t d = x.cols();
  Tensor out = like(count * batch, d);
  for (std::size_t s = 0; s < batch; ++s) {
    std::copy_n(x.value().data() + (s * seg_len + begin) * d, count * d,
                out.data() + s * count * d);
  }
  const std::size_t ix = x.id();
  const Var parents[] = {x};
  return x.tape()->record(std::move(out), parents, [=](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    auto dst = t.grad_buffer(ix);
    for (std::size_t s = 0; s < batch; ++s) {
      for (std::size_t i = 0; i < count * d; ++i) {
        dst[(s * seg_len + begin) * d + i] += g[s * count * d + i];
      }
    }
  });
}

Var mean_segments(Var x, std::size_t seg_len, std::size_t batch) {
  require(seg_len >= 1, "mean_segments: empty sequence");
  require(x.rows() == seg_len * batch,
          "mean_segments: " + shape_string(x.value().shape()) + " is not " +
              std::to_string(batch) + " segments of " + std::to_string(seg_len) + " rows");
  const std::size_t d = x.cols();
  const double inv = 1.0 / static_cast<double>(seg_len);
  Tensor out = like(batch, d);
  for (std::size_t s = 0; s < batch; ++s) {
    for (std::size_t r = 0; r < seg_len; ++r) {
      for (std::size_t c = 0; c < d; ++c) out[s * d + c] += x.value()[(s * seg_len + r) * d + c];
    }
    for (std::size_t c = 0; c < d; ++c) out[s * d + c] *= inv;
  }
  const std::size_t ix = x.id();
  const Var parents[] = {x};
  return x.tape()->record(std::move(out), parents, [=](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    auto dst = t.grad_buffer(ix);
    for (std::size_t s = 0; s < batch; ++s) {
      for (std::size_t r = 0; r < seg_len; ++r) {
        for (std::size_t c = 0; c < d; ++c) dst[(s * seg_len + r) * d + c] += inv * g[s * d + c];
      }
    }
  });
}

Var gather_rows(Var table, std::span<const int> ids) {
  require(!ids.empty(), "gather_rows: no ids");
  const std::size_t d = table.cols(), n = table.rows();
  Tensor out = like(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= n) {
      throw Error("gather_rows: id " + std::to_string(ids[i]) + " outside [0, " +
                  std::to_string(n) + ")");
    }
    std::copy_n(table.value().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  const std::size_t it = table.id();
  std::vector<int> rows(ids.begin(), ids.end());
  const Var parents[] = {table};
  return table.tape()->record(std::move(out), parents,
                              [=, rows = std::move(rows)](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    auto dst = t.grad_buffer(it);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t c = 0; c < d; ++c) dst[static_cast<std::size_t>(rows[i]) * d + c] += g[i * d + c];
    }
  });
}

namespace {

void check_labels(const Var& logits, std::span<const int> labels, const char* op) {
  require(labels.size() == logits.rows(),
          std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
              std::to_string(logits.rows()) + " rows");
  for (int l : labels) {
    require(l >= 0 && static_cast<std::size_t>(l) < logits.cols(),
            std::string(op) + ": label " + std::to_string(l) + " outside [0, " +
                std::to_string(logits.cols()) + ")");
  }
}

}  // namespace

Var cross_entropy(Var logits, std::span<const int> labels) {
  check_labels(logits, labels, "cross_entropy");
  const std::size_t m = logits.rows(), k = logits.cols();
  auto probs = std::make_shared<std::vector<double>>(m * k);
  kernels::softmax_rows(logits.value().values(), *probs, m, k);
  double loss = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    // log-softmax computed directly to keep tiny probabilities exact
    const double* row = logits.value().data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) sum += std::exp(row[c] - mx);
    loss -= row[labels[r]] - mx - std::log(sum);
  }
  loss /= static_cast<double>(m);
  const std::size_t il = logits.id();
  std::vector<int> y(labels.begin(), labels.end());
  const Var parents[] = {logits};
  return logits.tape()->record(Tensor({1}, loss), parents,
                               [=, y = std::move(y)](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0] / static_cast<double>(m);
    auto dst = t.grad_buffer(il);
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < k; ++c) {
        const double target = static_cast<std::size_t>(y[r]) == c ? 1.0 : 0.0;
        dst[r * k + c] += g * ((*probs)[r * k + c] - target);
      }
    }
  });
}

Var binary_cross_entropy(Var logits, std::span<const int> labels) {
  check_labels(logits, labels, "binary_cross_entropy");
  const std::size_t m = logits.rows(), k = logits.cols();
  double loss = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < k; ++c) {
      const double z = logits.value()[r * k + c];
      const double target = static_cast<std::size_t>(labels[r]) == c ? 1.0 : 0.0;
      // log(1 + e^z) - target * z, stable for large |z|
      loss += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - target * z;
    }
  }
  loss /= static_cast<double>(m);
  const std::size_t il = logits.id();
  std::vector<int> y(labels.begin(), labels.end());
  const Var parents[] = {logits};
  return logits.tape()->record(Tensor({1}, loss), parents,
                               [=, y = std::move(y)](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0] / static_cast<double>(m);
    auto dst = t.grad_buffer(il);
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < k; ++c) {
        const double z = t.value(il)[r * k + c];
        const double target = static_cast<std::size_t>(y[r]) == c ? 1.0 : 0.0;
        dst[r * k + c] += g * (1.0 / (1.0 + std::exp(-z)) - target);
      }
    }
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  const std::size_t ix = x.id();
  const Var parents[] = {x};
  return x.tape()->record(Tensor({1}, s), parents, [=](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (auto& v : t.grad_buffer(ix)) v += g;
  });
}

Var sum_squares(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v * v;
  const std::size_t ix = x.id();
  const Var parents[] = {x};
  return x.tape()->record(Tensor({1}, s), parents, [=](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    auto src = t.value(ix).values();
    auto dst = t.grad_buffer(ix);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += 2.0 * g * src[i];
  });
}

}  // namespace ad
}  // namespace dvp
