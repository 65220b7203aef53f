// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "dvp/kernels.hpp"
#include "dvp/tensor.hpp"

namespace dvp {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode gradient tape.
///
/// Nodes are appended in evaluation order, so parents always precede their
/// children and a single reverse sweep visits every node once. A tape is
/// single-threaded; run independent tapes for independent work.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// With gradients disabled, bound parameters behave as constants and no
  /// backward closures are kept. Use for evaluation.
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor value);
  /// Tape-local leaf that receives a gradient.
  Var variable(Tensor value);
  /// Leaf bound to an external parameter. Gradients flow only when the
  /// tensor has requires_grad set. Binding the same tensor twice returns
  /// the same node.
  Var param(Tensor& tensor);

  /// Appends an interior node. `backward` is called once during the reverse
  /// sweep with this node's id, and only if some parent needs a gradient.
  Var record(Tensor value, std::span<const Var> parents, BackwardFn backward);

  /// Seeds d(root)/d(root) = 1 and sweeps. `root` must hold one element.
  void backward(Var root);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id()].needs_grad; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Gradient of a node after backward(); empty when none reached it.
  std::span<const double> grad(Var v) const { return nodes_[v.id()].grad; }
  std::span<const double> grad(std::size_t id) const { return nodes_[id].grad; }

  /// Zero-initialized gradient buffer of a node, allocated on first use.
  std::span<double> grad_buffer(std::size_t id);

  /// Adds every bound parameter's gradient into Tensor::grad.
  void accumulate_param_grads();

  /// Visits (parameter, gradient) for each bound trainable parameter that
  /// received a gradient, in binding order.
  void for_each_param_grad(
      const std::function<void(Tensor&, std::span<const double>)>& visit) const;

  std::size_t size() const { return nodes_.size(); }
  std::size_t visited_in_last_backward() const { return visited_; }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    BackwardFn backward;
    Tensor* param = nullptr;
    bool needs_grad = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> bound_;
  std::vector<std::size_t> param_order_;
  std::size_t visited_ = 0;
  bool grad_enabled_ = true;
};

/// Differentiable operations. Every function checks shapes and throws
/// dvp::Error naming the offending shapes.
namespace ad {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
/// x[r, :] + bias for every row r.
Var add_bias(Var x, Var bias);
/// x[r, :] + pattern[r % pattern.rows(), :]
Var add_periodic(Var x, Var pattern);
/// Stacks `times` copies of x vertically.
Var repeat_rows(Var x, std::size_t times);
Var scale(Var x, double s);
Var gelu(Var x);
Var softmax_rows(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps);

/// Multi-head attention over batched segments. `q` holds batch*q_len rows,
/// `k` and `v` hold batch*kv_len rows. When `probs_out` is non-null it
/// receives the probabilities, shape [batch*heads*q_len, kv_len].
Var attention(Var q, Var k, Var v, const AttentionDims& dims,
              Tensor* probs_out = nullptr);

/// Per batch item: the `a_len` rows of a, then the `b_len` rows of b.
Var concat_segments(Var a, std::size_t a_len, Var b, std::size_t b_len,
                    std::size_t batch);
/// Per batch item: rows [begin, begin + count) of each `seg_len` segment.
Var slice_segments(Var x, std::size_t seg_len, std::size_t begin,
                   std::size_t count, std::size_t batch);
/// Per batch item: mean of the segment's rows.
Var mean_segments(Var x, std::size_t seg_len, std::size_t batch);
/// Row lookup table[ids[i], :]
Var gather_rows(Var table, std::span<const int> ids);

/// Mean softmax cross-entropy over rows.
Var cross_entropy(Var logits, std::span<const int> labels);
/// Mean over rows of summed per-class binary cross-entropy against one-hot
/// targets.
Var binary_cross_entropy(Var logits, std::span<const int> labels);

Var sum(Var x);
Var sum_squares(Var x);

}  // namespace ad
}  // namespace dvp
