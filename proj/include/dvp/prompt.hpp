// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "dvp/model.hpp"

namespace dvp {

enum class Strategy {
  Common,     // all N projected visual rows prepended at layer 1
  Cls,        // only the visual [CLS] row prepended at layer 1
  DvpSingle,  // one cross-attention prompt token inserted at layer K
  DvpMulti,   // one prompt token per text query row inserted at layer K
};

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);
bool is_dvp(Strategy s);

struct PromptSpec {
  Strategy strategy = Strategy::DvpSingle;
  std::size_t layer = 1;      // insertion layer K, 1-based
  std::size_t generator = 0;  // index into Model::generators

  /// Throws if K is outside [1, M], if a baseline strategy is not at layer
  /// 1, or if a DVP strategy names a generator the model does not have.
  void validate(const Model& model) const;
};

/// Model inputs for `size` examples: size*L token ids and a
/// [size*visual_len x d_v] feature matrix (row 0 of each block is the
/// visual [CLS] row).
struct Batch {
  std::size_t size = 0;
  std::vector<int> tokens;
  Tensor visual;
  std::size_t visual_len = 0;
  std::vector<int> labels;
};

/// Query rows for the generator. Encoder kind: dvp-single uses the [CLS]
/// row; encoder-decoder kind: dvp-single uses the mean of the rows.
/// dvp-multi uses all rows. Throws for the baseline strategies.
Var make_query(ModelKind kind, Var text_state, Segments seg, Strategy strategy);

struct ForwardResult {
  Var logits;
  /// Sequence length seen by each encoder / decoder layer (index = layer - 1).
  std::vector<std::size_t> encoder_lengths;
  std::vector<std::size_t> decoder_lengths;
  std::optional<AttentionTrace> encoder_attention;
  std::optional<AttentionTrace> decoder_attention;
  /// Cross-attention map of the prompt generator (first batch item,
  /// averaged over heads), when traced.
  std::optional<Tensor> prompt_attention;
};

/// Split forward pass with prompt insertion. Encoder kind: layers 1..K-1 on
/// the text, prompt generated from the hidden state before layer K, layers
/// K..M on [prompt; text], classify the text [CLS] row. Encoder-decoder
/// kind: full encoder, decoder stream starts from the learned input vector,
/// prompt joins it before decoder layer K, classify the input-vector row.
ForwardResult forward_with_prompt(Tape& tape, Model& model, const PromptSpec& spec,
                                  const Batch& batch, bool trace_attention = false);

/// Total number of tokens the language model processes after insertion
/// (text + prompts, plus the decoder input for encoder-decoder models).
std::size_t token_count(ModelKind kind, std::size_t text_len, std::size_t visual_len,
                        Strategy strategy);

}  // namespace dvp
