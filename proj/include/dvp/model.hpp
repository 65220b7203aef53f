// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dvp/adapter.hpp"
#include "dvp/autograd.hpp"
#include "dvp/prompt_generator.hpp"

namespace dvp {

enum class ModelKind { Encoder, EncoderDecoder };

std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& s);

struct ModelSpec {
  ModelKind kind = ModelKind::Encoder;
  std::size_t layers = 6;  // per stack
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t vocab = 64;
  std::size_t text_len = 8;  // includes the [CLS] slot at position 0
  std::size_t num_classes = 8;

  void validate() const;
  std::size_t ffn_width() const { return ffn_mult * width; }
  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Weight is [in x out]; bias is [out].
struct Linear {
  Tensor weight;
  Tensor bias;

  static Linear create(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true);
};

struct Norm {
  Tensor gain;
  Tensor bias;

  static Norm create(std::size_t width);
};

struct AttentionBlock {
  Linear query, key, value, output;
};

/// Post-norm transformer layer. Decoder layers additionally carry a
/// cross-attention sublayer over the encoder output.
struct TransformerLayer {
  AttentionBlock self_attn;
  Norm attn_norm;
  std::optional<AttentionBlock> cross_attn;
  std::optional<Norm> cross_norm;
  Linear ffn_up;
  Linear ffn_down;
  Norm ffn_norm;
  std::optional<Adapter> adapter_attn;
  std::optional<Adapter> adapter_cross;
  std::optional<Adapter> adapter_ffn;
};

struct Model {
  ModelSpec spec;
  std::size_t visual_width = 0;
  Tensor token_embedding;     // [vocab x d]
  Tensor position_embedding;  // [L x d]
  Norm embed_norm;
  std::vector<TransformerLayer> encoder;
  std::vector<TransformerLayer> decoder;  // encoder-decoder kind only
  Tensor decoder_input;                   // [1 x d], encoder-decoder kind only
  Linear head;                            // [d x num_classes]
  Linear visual_projection;               // [d_v x d]
  std::vector<PromptGenerator> generators;  // one per candidate insertion layer in search
  std::size_t adapter_width = 0;

  using Visitor = std::function<void(const std::string&, Tensor&)>;
  using ConstVisitor = std::function<void(const std::string&, const Tensor&)>;
  /// Visits every parameter with a unique, stable name.
  void visit(const Visitor& fn);
  void visit(const ConstVisitor& fn) const;

  std::size_t adapter_count() const;
};

/// Uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] initialization from `seed`.
Model build_model(const ModelSpec& spec, std::size_t visual_width,
                  std::size_t generators, std::uint64_t seed);

enum class Stack { Encoder, Decoder };

/// Rows of a batched activation: `batch` sequences of `length` rows each.
struct Segments {
  std::size_t batch = 1;
  std::size_t length = 1;
  std::size_t rows() const { return batch * length; }
};

struct CrossContext {
  Var states;
  std::size_t length = 0;
};

/// Per-layer self-attention maps of the first batch item, averaged over
/// heads. Indexed by the layer's 1-based position in its stack.
struct AttentionTrace {
  std::vector<Tensor> layers;
};

/// tokens: batch*L ids. Row i = token embedding + position embedding i,
/// followed by the embedding layer norm.
Var embed_text(Tape& tape, Model& model, std::span<const int> tokens, std::size_t batch);

/// Applies layers from..to (1-based, inclusive) of the chosen stack. An
/// empty range (from > to) returns x unchanged. Decoder layers require a
/// cross context.
Var run_layers(Tape& tape, Model& model, Stack stack, Var x, Segments seg,
               std::size_t from, std::size_t to,
               const std::optional<CrossContext>& cross = std::nullopt,
               AttentionTrace* trace = nullptr);

enum class PoolMode { Cls, Mean };

/// One row per batch item: row 0 of each segment (cls) or the segment mean.
Var pool(Var x, Segments seg, PoolMode mode);

/// Affine map to logits, one row per input row.
Var classify(Tape& tape, Model& model, Var pooled);

struct ParamCount {
  std::size_t total = 0;
  std::size_t trainable = 0;
};

/// Exact parameter counts. `trainable` counts names accepted by the filter.
ParamCount count_params(const Model& model,
                        const std::function<bool(const std::string&)>& trainable);
/// Uses each tensor's requires_grad flag.
ParamCount count_params(const Model& model);

/// Closed-form counts for a model that was never allocated. With
/// adapter_width > 0 the trainable count follows
/// FreezePolicy::adapter_tuning(); otherwise everything is trainable.
ParamCount param_budget(const ModelSpec& spec, std::size_t visual_width,
                        std::size_t generators, std::size_t adapter_width);

}  // namespace dvp
