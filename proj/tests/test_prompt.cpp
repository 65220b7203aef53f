// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "dvp/prompt.hpp"
#include "dvp/training.hpp"
#include "helpers.hpp"

using namespace dvp;
using dvp::test::max_abs_diff;
using dvp::test::random_tensor;

namespace {

ModelSpec small_spec(ModelKind kind) {
  ModelSpec s;
  s.kind = kind;
  s.layers = 4;
  s.width = 8;
  s.heads = 2;
  s.vocab = 10;
  s.text_len = 5;
  s.num_classes = 3;
  return s;
}

Batch make_random_batch(std::size_t size, std::size_t L, std::size_t N, std::size_t dv, Rng& rng) {
  Batch b;
  b.size = size;
  b.visual_len = N;
  b.visual = random_tensor({size * N, dv}, rng);
  for (std::size_t i = 0; i < size * L; ++i) b.tokens.push_back(static_cast<int>(rng.below(10)));
  for (std::size_t i = 0; i < size; ++i) b.labels.push_back(static_cast<int>(rng.below(3)));
  return b;
}

/// Per-head attention written as explicit loops.
Tensor brute_force_dvp(const PromptGenerator& g, const Tensor& query, const Tensor& visual) {
  const std::size_t d = g.width(), H = g.heads, dh = d / H;
  auto mul = [](const Tensor& a, const Tensor& b) {
    Tensor c({a.rows(), b.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t j = 0; j < b.cols(); ++j)
        for (std::size_t t = 0; t < a.cols(); ++t) c(i, j) += a(i, t) * b(t, j);
    return c;
  };
  const Tensor Q = mul(query, g.query), K = mul(visual, g.key), V = mul(visual, g.value);
  Tensor heads({query.rows(), d});
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t i = 0; i < query.rows(); ++i) {
      std::vector<double> s(visual.rows());
      double mx = -INFINITY;
      for (std::size_t j = 0; j < visual.rows(); ++j) {
        double dot = 0.0;
        for (std::size_t t = 0; t < dh; ++t) dot += Q(i, h * dh + t) * K(j, h * dh + t);
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (auto& v : s) z += (v = std::exp(v - mx));
      for (std::size_t j = 0; j < visual.rows(); ++j)
        for (std::size_t t = 0; t < dh; ++t) heads(i, h * dh + t) += s[j] / z * V(j, h * dh + t);
    }
  }
  return mul(heads, g.output);
}

}  // namespace

TEST_CASE("strategy names round-trip") {
  for (Strategy s : {Strategy::Common, Strategy::Cls, Strategy::DvpSingle, Strategy::DvpMulti}) {
    CHECK(strategy_from_string(to_string(s)) == s);
  }
  CHECK_THROWS_AS(strategy_from_string("late"), Error);
}

TEST_CASE("generate_dvp matches a per-head brute-force oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    PromptGenerator g = PromptGenerator::create(4, 2, rng);
    Tensor q = random_tensor({2, 4}, rng);
    Tensor v = random_tensor({3, 4}, rng);
    CHECK(max_abs_diff(generate_dvp(g, q, v), brute_force_dvp(g, q, v)) < 1e-12);
  }
}

TEST_CASE("generate_dvp with a single key returns the projected value") {
  Rng rng(12);
  PromptGenerator g = PromptGenerator::create(8, 4, rng);
  Tensor q = random_tensor({3, 8}, rng);
  Tensor v = random_tensor({1, 8}, rng);
  Tape t;
  Tensor probs;
  Var out = generate_dvp(t, g, t.constant(q), t.constant(v), 1, 3, 1, &probs);
  for (double p : probs.values()) CHECK(p == 1.0);
  const Tensor expect = ad::matmul(ad::matmul(t.constant(v), t.constant(g.value)), t.constant(g.output)).value();
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 8; ++c) CHECK(std::abs(out.value()(r, c) - expect(0, c)) < 1e-14);
}

TEST_CASE("generate_dvp shapes, row sums and width errors") {
  Rng rng(13);
  PromptGenerator g = PromptGenerator::create(8, 2, rng);
  Tensor v = random_tensor({6, 8}, rng);
  CHECK(generate_dvp(g, random_tensor({1, 8}, rng), v).rows() == 1);
  CHECK(generate_dvp(g, random_tensor({5, 8}, rng), v).rows() == 5);
  Tape t;
  Tensor probs;
  generate_dvp(t, g, t.constant(random_tensor({5, 8}, rng)), t.constant(v), 1, 5, 6, &probs);
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    double sum = 0.0;
    for (double p : probs.row(r)) sum += p;
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
  CHECK_THROWS_AS(generate_dvp(g, random_tensor({1, 6}, rng), v), Error);
  CHECK_THROWS_AS(PromptGenerator::create(8, 3, rng), Error);
}

TEST_CASE("make_query picks the documented rows") {
  Rng rng(14);
  Tape t;
  const Tensor x = random_tensor({2 * 3, 4}, rng);
  Var xv = t.constant(x);
  const Tensor enc = make_query(ModelKind::Encoder, xv, {2, 3}, Strategy::DvpSingle).value();
  CHECK(enc.rows() == 2);
  for (std::size_t c = 0; c < 4; ++c) {
    CHECK(enc(0, c) == x(0, c));
    CHECK(enc(1, c) == x(3, c));
    CHECK(std::abs(make_query(ModelKind::EncoderDecoder, xv, {2, 3}, Strategy::DvpSingle).value()(1, c) -
                   (x(3, c) + x(4, c) + x(5, c)) / 3.0) < 1e-15);
  }
  CHECK(make_query(ModelKind::Encoder, xv, {2, 3}, Strategy::DvpMulti).value() == x);
  CHECK_THROWS_AS(make_query(ModelKind::Encoder, xv, {2, 3}, Strategy::Common), Error);
  CHECK_THROWS_AS(make_query(ModelKind::Encoder, xv, {2, 3}, Strategy::Cls), Error);
}

TEST_CASE("prompt spec validation") {
  Model m = build_model(small_spec(ModelKind::Encoder), 6, 1, 1);
  CHECK_THROWS_AS((PromptSpec{Strategy::DvpSingle, 0, 0}.validate(m)), Error);
  CHECK_THROWS_AS((PromptSpec{Strategy::DvpSingle, 5, 0}.validate(m)), Error);
  CHECK_THROWS_AS((PromptSpec{Strategy::DvpSingle, 2, 1}.validate(m)), Error);
  CHECK_THROWS_AS((PromptSpec{Strategy::Common, 2, 0}.validate(m)), Error);
  CHECK_NOTHROW((PromptSpec{Strategy::Cls, 1, 0}.validate(m)));
  Model bare = build_model(small_spec(ModelKind::Encoder), 6, 0, 1);
  CHECK_THROWS_AS((PromptSpec{Strategy::DvpMulti, 1, 0}.validate(bare)), Error);
}

TEST_CASE("sequence length bookkeeping and token counts") {
  Rng rng(15);
  const std::size_t L = 5, N = 7;
  Model enc = build_model(small_spec(ModelKind::Encoder), 6, 1, 1);
  Batch b = make_random_batch(2, L, N, 6, rng);
  Tape t;
  auto r = forward_with_prompt(t, enc, PromptSpec{Strategy::DvpSingle, 3, 0}, b);
  CHECK(r.encoder_lengths == std::vector<std::size_t>{L, L, L + 1, L + 1});
  r = forward_with_prompt(t, enc, PromptSpec{Strategy::Common, 1, 0}, b);
  CHECK(r.encoder_lengths == std::vector<std::size_t>(4, N + L));
  r = forward_with_prompt(t, enc, PromptSpec{Strategy::Cls, 1, 0}, b);
  CHECK(r.encoder_lengths == std::vector<std::size_t>(4, 1 + L));
  r = forward_with_prompt(t, enc, PromptSpec{Strategy::DvpMulti, 2, 0}, b);
  CHECK(r.encoder_lengths == std::vector<std::size_t>{L, 2 * L, 2 * L, 2 * L});
  CHECK(r.logits.rows() == 2);

  Model ed = build_model(small_spec(ModelKind::EncoderDecoder), 6, 1, 1);
  r = forward_with_prompt(t, ed, PromptSpec{Strategy::DvpSingle, 2, 0}, b);
  CHECK(r.encoder_lengths == std::vector<std::size_t>(4, L));
  CHECK(r.decoder_lengths == std::vector<std::size_t>{1, 2, 2, 2});

  CHECK(token_count(ModelKind::Encoder, 16, 197, Strategy::DvpSingle) == 17);
  CHECK(token_count(ModelKind::EncoderDecoder, 16, 197, Strategy::DvpSingle) == 18);
  CHECK(token_count(ModelKind::Encoder, 16, 197, Strategy::Common) == 213);
}

TEST_CASE("dvp-single at layer 1 equals an explicit concatenation path") {
  Rng rng(16);
  Model m = build_model(small_spec(ModelKind::Encoder), 6, 1, 2);
  Batch b = make_random_batch(3, 5, 4, 6, rng);
  Tape t;
  const Tensor logits = forward_with_prompt(t, m, PromptSpec{Strategy::DvpSingle, 1, 0}, b).logits.value();

  Tape u;
  Var text = embed_text(u, m, b.tokens, 3);
  Var query = ad::slice_segments(text, 5, 0, 1, 3);
  Var vis = ad::add_bias(ad::matmul(u.constant(b.visual), u.param(m.visual_projection.weight)),
                         u.param(m.visual_projection.bias));
  Var prompt = generate_dvp(u, m.generators[0], query, vis, 3, 1, 4);
  Var x = run_layers(u, m, Stack::Encoder, ad::concat_segments(prompt, 1, text, 5, 3), {3, 6}, 1, 4);
  const Tensor manual = classify(u, m, ad::slice_segments(x, 6, 1, 1, 3)).value();
  CHECK(logits == manual);
}

TEST_CASE("dvp logits are invariant to permuting the non-cls visual rows") {
  Rng rng(17);
  for (ModelKind kind : {ModelKind::Encoder, ModelKind::EncoderDecoder}) {
    Model m = build_model(small_spec(kind), 6, 1, 3);
    Batch b = make_random_batch(1, 5, 6, 6, rng);
    Batch p = b;
    const std::size_t perm[] = {0, 3, 5, 1, 4, 2};
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t c = 0; c < 6; ++c) p.visual(r, c) = b.visual(perm[r], c);
    for (Strategy st : {Strategy::DvpSingle, Strategy::DvpMulti}) {
      Tape t;
      const Tensor a = forward_with_prompt(t, m, PromptSpec{st, 2, 0}, b).logits.value();
      const Tensor c = forward_with_prompt(t, m, PromptSpec{st, 2, 0}, p).logits.value();
      CHECK(max_abs_diff(a, c) < 1e-12);
    }
  }
}

TEST_CASE("layers before the insertion point match a text-only pass bit for bit") {
  Rng rng(18);
  Model m = build_model(small_spec(ModelKind::Encoder), 6, 1, 4);
  Batch b = make_random_batch(2, 5, 4, 6, rng);
  Tape t;
  auto r = forward_with_prompt(t, m, PromptSpec{Strategy::DvpSingle, 3, 0}, b, true);
  Tape u;
  AttentionTrace text_only;
  run_layers(u, m, Stack::Encoder, embed_text(u, m, b.tokens, 2), {2, 5}, 1, 4, std::nullopt, &text_only);
  CHECK(r.encoder_attention->layers[0] == text_only.layers[0]);
  CHECK(r.encoder_attention->layers[1] == text_only.layers[1]);
  CHECK(r.encoder_attention->layers[2].rows() == 6);
}

TEST_CASE("one training step moves the generator query weights") {
  Rng rng(19);
  Model m = build_model(small_spec(ModelKind::Encoder), 6, 1, 5);
  Batch b = make_random_batch(4, 5, 4, 6, rng);
  const Tensor before = m.generators[0].query;
  OptimizerConfig oc;
  oc.lr = 0.1;
  Optimizer opt(oc);
  train_step(m, PromptSpec{Strategy::DvpSingle, 2, 0}, b, opt, LossKind::SoftmaxCrossEntropy);
  CHECK(max_abs_diff(before, m.generators[0].query) > 0.0);
}
