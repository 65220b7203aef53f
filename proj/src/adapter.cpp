// SPDX-License-Identifier: Apache-2.0
#include "dvp/adapter.hpp"

#include <cmath>

#include "dvp/model.hpp"

namespace dvp {

Adapter Adapter::create(std::size_t input_width, std::size_t hidden_width, Rng& rng) {
  if (hidden_width < 1 || hidden_width >= input_width) {
    throw Error("adapter: hidden width " + std::to_string(hidden_width) +
                " must be in [1, " + std::to_string(input_width) + ")");
  }
  Adapter a;
  const double bound = 1.0 / std::sqrt(static_cast<double>(input_width));
  a.down = Tensor({input_width, hidden_width});
  for (auto& v : a.down.values()) v = rng.uniform(-bound, bound);
  a.down_bias = Tensor({hidden_width});
  for (auto& v : a.down_bias.values()) v = rng.uniform(-bound, bound);
  a.up = Tensor({hidden_width, input_width}, 0.0);
  a.up_bias = Tensor({input_width}, 0.0);
  return a;
}

Var adapter_forward(Tape& tape, Adapter& adapter, Var x) {
  if (x.cols() != adapter.input_width()) {
    throw Error("adapter_forward: input width " + std::to_string(x.cols()) +
                " does not match adapter width " + std::to_string(adapter.input_width()));
  }
  Var h = ad::add_bias(ad::matmul(x, tape.param(adapter.down)), tape.param(adapter.down_bias));
  Var o = ad::add_bias(ad::matmul(ad::gelu(h), tape.param(adapter.up)), tape.param(adapter.up_bias));
  return ad::add(x, o);
}

Tensor adapter_forward(const Adapter& adapter, const Tensor& x) {
  Tape tape;
  tape.set_grad_enabled(false);
  Adapter copy = adapter;
  return adapter_forward(tape, copy, tape.constant(x.detached())).value();
}

FreezePolicy FreezePolicy::adapter_tuning() {
  return FreezePolicy{{"adapter_", "dvp.", "visual.proj", "head.", "norm."}};
}

bool FreezePolicy::is_trainable(const std::string& name) const {
  for (const auto& p : trainable_patterns) {
    if (name.find(p) != std::string::npos) return true;
  }
  return false;
}

void apply_freeze_policy(Model& model, const FreezePolicy& policy) {
  model.visit(Model::Visitor([&](const std::string& name, Tensor& t) {
    t.set_requires_grad(policy.is_trainable(name));
  }));
}

void attach_adapters(Model& model, std::size_t hidden_width, Rng& rng) {
  const std::size_t d = model.spec.width;
  if (hidden_width < 1 || hidden_width >= d) {
    throw Error("attach_adapters: hidden width " + std::to_string(hidden_width) +
                " must be in [1, " + std::to_string(d) + ")");
  }
  if (model.adapter_width != 0) throw Error("attach_adapters: model already has adapters");
  auto attach = [&](std::vector<TransformerLayer>& stack) {
    for (auto& layer : stack) {
      layer.adapter_attn = Adapter::create(d, hidden_width, rng);
      if (layer.cross_attn) layer.adapter_cross = Adapter::create(d, hidden_width, rng);
      layer.adapter_ffn = Adapter::create(d, hidden_width, rng);
    }
  };
  attach(model.encoder);
  attach(model.decoder);
  model.adapter_width = hidden_width;
  apply_freeze_policy(model, FreezePolicy::adapter_tuning());
}

}  // namespace dvp
