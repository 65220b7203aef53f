// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

#include "dvp/autograd.hpp"
#include "dvp/rng.hpp"

namespace dvp {

/// Cross-modal attention block that turns text queries and visual features
/// into prompt tokens. All four projections are [d x d] without biases;
/// head i uses columns [i*d/h, (i+1)*d/h) of the Q/K/V projections.
struct PromptGenerator {
  Tensor query;
  Tensor key;
  Tensor value;
  Tensor output;
  std::size_t heads = 1;

  std::size_t width() const { return query.rows(); }
  static PromptGenerator create(std::size_t width, std::size_t heads, Rng& rng);
};

/// Batched cross attention: `query` holds batch*q_len rows, `visual` holds
/// batch*visual_len rows, both of width d. Returns batch*q_len prompt rows.
/// Scores are scaled by 1/sqrt(d/heads). When `probs_out` is non-null it
/// receives the attention probabilities ([batch*heads*q_len, visual_len]).
Var generate_dvp(Tape& tape, PromptGenerator& gen, Var query, Var visual,
                 std::size_t batch, std::size_t q_len, std::size_t visual_len,
                 Tensor* probs_out = nullptr);

/// Single-example convenience: query [q x d], visual [N x d].
Tensor generate_dvp(PromptGenerator& gen, const Tensor& query, const Tensor& visual);

}  // namespace dvp
