// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "dvp/flops.hpp"

using namespace dvp;

namespace {

/// MACs of an [m x k] by [k x n] product.
std::uint64_t mm(std::uint64_t m, std::uint64_t k, std::uint64_t n) { return m * k * n; }

/// Walks the forward pass matrix product by matrix product.
std::uint64_t oracle_macs(const ModelSpec& s, Strategy st, std::size_t K, std::size_t N,
                          std::size_t dv) {
  const std::uint64_t d = s.width, f = s.ffn_width(), L = s.text_len;
  std::uint64_t q = 0;
  if (st == Strategy::Common) q = N;
  if (st == Strategy::Cls || st == Strategy::DvpSingle) q = 1;
  if (st == Strategy::DvpMulti) q = L;
  const bool dvp = st == Strategy::DvpSingle || st == Strategy::DvpMulti;

  std::uint64_t total = 0;
  auto self_layer = [&](std::uint64_t S) {
    total += 4 * mm(S, d, d);            // q, k, v, o
    total += mm(S, d, S) + mm(S, S, d);  // scores and mixing over all heads
    total += mm(S, d, f) + mm(S, f, d);  // feed-forward
  };
  auto cross = [&](std::uint64_t S, std::uint64_t ctx) {
    total += 2 * mm(S, d, d) + 2 * mm(ctx, d, d);
    total += mm(S, d, ctx) + mm(S, ctx, d);
  };
  // Prompt rows.
  if (st == Strategy::Common) total += mm(N, dv, d);
  if (st == Strategy::Cls) total += mm(1, dv, d);
  if (dvp) {
    total += mm(N, dv, d);                    // visual projector
    total += mm(q, d, d) + 2 * mm(N, d, d);   // generator q, k, v
    total += mm(q, d, N) + mm(q, N, d);       // generator attention
    total += mm(q, d, d);                     // generator output
  }
  const std::size_t M = s.layers;
  if (s.kind == ModelKind::Encoder) {
    for (std::size_t i = 1; i <= M; ++i) self_layer(dvp ? (i < K ? L : L + q) : L + q);
  } else {
    const std::uint64_t ctx = dvp ? L : L + q;
    for (std::size_t i = 1; i <= M; ++i) self_layer(ctx);
    for (std::size_t i = 1; i <= M; ++i) {
      const std::uint64_t S = dvp && i >= K ? 1 + q : 1;
      self_layer(S);
      cross(S, ctx);
    }
  }
  total += mm(1, d, s.num_classes);
  return total;
}

}  // namespace

TEST_CASE("flops estimate equals a product-by-product count") {
  for (ModelKind kind : {ModelKind::Encoder, ModelKind::EncoderDecoder}) {
    ModelSpec s;
    s.kind = kind;
    s.layers = 6;
    s.width = 64;
    s.heads = 4;
    s.text_len = 16;
    for (Strategy st : {Strategy::Common, Strategy::Cls, Strategy::DvpSingle, Strategy::DvpMulti}) {
      const std::size_t max_k = (st == Strategy::DvpSingle || st == Strategy::DvpMulti) ? 6 : 1;
      for (std::size_t K = 1; K <= max_k; ++K) {
        for (std::size_t dv : {64u, 512u}) {
          const FlopsReport r = estimate_flops(s, PromptSpec{st, K, 0}, 197, dv);
          INFO(to_string(kind) << " " << to_string(st) << " K=" << K << " dv=" << dv);
          CHECK(r.total == oracle_macs(s, st, K, 197, dv));
          CHECK(r.total == r.projections + r.scores + r.prompt + r.head);
          CHECK(r.common_total == oracle_macs(s, Strategy::Common, 1, 197, dv));
        }
      }
    }
  }
}

TEST_CASE("a hand-sized example") {
  ModelSpec s;
  s.layers = 1;
  s.width = 2;
  s.heads = 1;
  s.ffn_mult = 1;
  s.text_len = 3;
  s.num_classes = 2;
  // cls prompting: S = 4. Projections 4 * (4*4 + 2*1*4) = 96, scores 2*16*2 = 64,
  // prompt 2*2 = 4, head 2*2 = 4.
  const FlopsReport r = estimate_flops(s, PromptSpec{Strategy::Cls, 1, 0}, 5, 2);
  CHECK(r.projections == 96);
  CHECK(r.scores == 64);
  CHECK(r.prompt == 4);
  CHECK(r.head == 4);
  CHECK(r.total == 168);
}

TEST_CASE("deeper insertion never costs more and beats common prompting") {
  ModelSpec s;
  s.layers = 6;
  s.width = 64;
  s.text_len = 16;
  std::uint64_t prev = UINT64_MAX;
  for (std::size_t K = 1; K <= 6; ++K) {
    const FlopsReport r = estimate_flops(s, PromptSpec{Strategy::DvpSingle, K, 0}, 197);
    CHECK(r.total <= prev);
    CHECK(r.ratio < 1.0);
    CHECK(r.reduction() == doctest::Approx(1.0 - r.ratio));
    prev = r.total;
  }
  const FlopsReport common = estimate_flops(s, PromptSpec{Strategy::Common, 1, 0}, 197);
  CHECK(common.ratio == 1.0);
}

TEST_CASE("sequence lengths per layer") {
  ModelSpec s;
  s.layers = 4;
  s.text_len = 8;
  std::vector<std::size_t> enc, dec;
  sequence_lengths(s, PromptSpec{Strategy::DvpMulti, 3, 0}, 10, enc, dec);
  CHECK(enc == std::vector<std::size_t>{8, 8, 16, 16});
  CHECK(dec.empty());
  s.kind = ModelKind::EncoderDecoder;
  sequence_lengths(s, PromptSpec{Strategy::DvpSingle, 2, 0}, 10, enc, dec);
  CHECK(enc == std::vector<std::size_t>(4, 8));
  CHECK(dec == std::vector<std::size_t>{1, 2, 2, 2});
  sequence_lengths(s, PromptSpec{Strategy::Common, 1, 0}, 10, enc, dec);
  CHECK(enc == std::vector<std::size_t>(4, 18));
  CHECK(dec == std::vector<std::size_t>(4, 1));
  CHECK_THROWS_AS(sequence_lengths(s, PromptSpec{Strategy::DvpSingle, 5, 0}, 10, enc, dec), Error);
  CHECK_THROWS_AS(sequence_lengths(s, PromptSpec{Strategy::DvpSingle, 1, 0}, 0, enc, dec), Error);
}
