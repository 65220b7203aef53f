// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dvp/autograd.hpp"
#include "dvp/rng.hpp"

namespace dvp {

struct Model;

/// Residual bottleneck: O = X + W_U * gelu(W_D * X + b_D) + b_U.
///
/// `down` is [d_i x d_h] and `up` is [d_h x d_i]. `up` and `up_bias` start
/// at zero so a freshly attached adapter is the identity.
struct Adapter {
  Tensor down;
  Tensor down_bias;
  Tensor up;
  Tensor up_bias;

  std::size_t input_width() const { return down.rows(); }
  std::size_t hidden_width() const { return down.cols(); }

  static Adapter create(std::size_t input_width, std::size_t hidden_width, Rng& rng);

  /// 2 * d_i * d_h + d_i + d_h
  static std::size_t parameter_count(std::size_t input_width, std::size_t hidden_width) {
    return 2 * input_width * hidden_width + input_width + hidden_width;
  }
};

Var adapter_forward(Tape& tape, Adapter& adapter, Var x);
/// Tape-free evaluation for inference and tests.
Tensor adapter_forward(const Adapter& adapter, const Tensor& x);

/// Name patterns that stay trainable in adapter mode. A parameter is
/// trainable iff its name contains one of the patterns.
struct FreezePolicy {
  std::vector<std::string> trainable_patterns;

  static FreezePolicy all_trainable() { return FreezePolicy{{""}}; }
  /// Adapters, prompt generators, visual projector, classification head and
  /// every layer norm.
  static FreezePolicy adapter_tuning();

  bool is_trainable(const std::string& name) const;
};

/// Sets requires_grad on every parameter of the model per the policy.
void apply_freeze_policy(Model& model, const FreezePolicy& policy);

/// Inserts one adapter after every attention sublayer and every FFN
/// sublayer of every layer (encoder and decoder stacks) and switches the
/// model to FreezePolicy::adapter_tuning(). Throws if hidden_width is 0 or
/// not smaller than the model width.
void attach_adapters(Model& model, std::size_t hidden_width, Rng& rng);

}  // namespace dvp
