// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "dvp/prompt.hpp"

namespace dvp {

/// Multiply-accumulate counts of one forward pass for one example. Only
/// matrix products are counted.
struct FlopsReport {
  std::vector<std::size_t> encoder_lengths;  // S per encoder layer
  std::vector<std::size_t> decoder_lengths;  // S per decoder layer
  std::uint64_t projections = 0;  // q/k/v/o and FFN, self and cross
  std::uint64_t scores = 0;       // attention scores and mixing, self and cross
  std::uint64_t prompt = 0;       // visual projection and prompt generator
  std::uint64_t head = 0;
  std::uint64_t total = 0;
  std::uint64_t common_total = 0;  // same model under common prompting
  double ratio = 1.0;              // total / common_total
  double reduction() const { return 1.0 - ratio; }
};

/// Per-layer sequence lengths implied by the strategy and insertion layer.
/// Encoder-decoder models get the decoder lengths in `decoder`.
void sequence_lengths(const ModelSpec& spec, const PromptSpec& prompt, std::size_t visual_len,
                      std::vector<std::size_t>& encoder, std::vector<std::size_t>& decoder);

/// `visual_width` of 0 means d_v = d.
FlopsReport estimate_flops(const ModelSpec& spec, const PromptSpec& prompt,
                           std::size_t visual_len, std::size_t visual_width = 0);

}  // namespace dvp
