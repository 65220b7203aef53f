// SPDX-License-Identifier: Apache-2.0
#include "dvp/prompt.hpp"

#include <cmath>

namespace dvp {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::Common: return "common";
    case Strategy::Cls: return "cls";
    case Strategy::DvpSingle: return "dvp-single";
    case Strategy::DvpMulti: return "dvp-multi";
  }
  return "?";
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "common") return Strategy::Common;
  if (s == "cls") return Strategy::Cls;
  if (s == "dvp-single") return Strategy::DvpSingle;
  if (s == "dvp-multi") return Strategy::DvpMulti;
  throw Error("unknown prompt strategy '" + s + "' (expected common | cls | dvp-single | dvp-multi)");
}

bool is_dvp(Strategy s) { return s == Strategy::DvpSingle || s == Strategy::DvpMulti; }

void PromptSpec::validate(const Model& model) const {
  const std::size_t M = model.spec.layers;
  if (layer < 1 || layer > M) {
    throw Error("prompt: insertion layer " + std::to_string(layer) + " outside [1, " +
                std::to_string(M) + "]");
  }
  if (!is_dvp(strategy) && layer != 1) {
    throw Error("prompt: " + to_string(strategy) + " prompting is inserted at layer 1, got " +
                std::to_string(layer));
  }
  if (is_dvp(strategy) && generator >= model.generators.size()) {
    throw Error("prompt: " + to_string(strategy) + " needs generator " +
                std::to_string(generator) + " but the model has " +
                std::to_string(model.generators.size()));
  }
}

Var generate_dvp(Tape& tape, PromptGenerator& gen, Var query, Var visual, std::size_t batch,
                 std::size_t q_len, std::size_t visual_len, Tensor* probs_out) {
  const std::size_t d = gen.width();
  if (query.cols() != d || visual.cols() != d) {
    throw Error("generate_dvp: query width " + std::to_string(query.cols()) +
                " and visual width " + std::to_string(visual.cols()) +
                " must both equal generator width " + std::to_string(d));
  }
  if (q_len < 1 || visual_len < 1) throw Error("generate_dvp: empty query or visual sequence");
  AttentionDims dims{batch, q_len, visual_len, d, gen.heads,
                     1.0 / std::sqrt(static_cast<double>(d / gen.heads))};
  Var q = ad::matmul(query, tape.param(gen.query));
  Var k = ad::matmul(visual, tape.param(gen.key));
  Var v = ad::matmul(visual, tape.param(gen.value));
  return ad::matmul(ad::attention(q, k, v, dims, probs_out), tape.param(gen.output));
}

Tensor generate_dvp(PromptGenerator& gen, const Tensor& query, const Tensor& visual) {
  Tape tape;
  tape.set_grad_enabled(false);
  return generate_dvp(tape, gen, tape.constant(query.detached()), tape.constant(visual.detached()),
                      1, query.rows(), visual.rows())
      .value();
}

Var make_query(ModelKind kind, Var text_state, Segments seg, Strategy strategy) {
  switch (strategy) {
    case Strategy::DvpSingle:
      return kind == ModelKind::Encoder ? pool(text_state, seg, PoolMode::Cls)
                                        : pool(text_state, seg, PoolMode::Mean);
    case Strategy::DvpMulti:
      return text_state;
    default:
      throw Error("make_query: " + to_string(strategy) + " prompting does not use a query");
  }
}

std::size_t token_count(ModelKind kind, std::size_t text_len, std::size_t visual_len,
                        Strategy strategy) {
  std::size_t prompts = 0;
  switch (strategy) {
    case Strategy::Common: prompts = visual_len; break;
    case Strategy::Cls: prompts = 1; break;
    case Strategy::DvpSingle: prompts = 1; break;
    case Strategy::DvpMulti: prompts = text_len; break;
  }
  return text_len + prompts + (kind == ModelKind::EncoderDecoder ? 1 : 0);
}

namespace {

Tensor average_heads(const Tensor& probs, std::size_t heads, std::size_t q_len,
                     std::size_t kv_len) {
  Tensor out({q_len, kv_len});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < q_len * kv_len; ++i) out[i] += probs[h * q_len * kv_len + i];
  }
  for (auto& v : out.values()) v /= static_cast<double>(heads);
  return out;
}

/// Baseline strategies: the rows prepended at layer 1.
Var baseline_prompts(Tape& tape, Model& model, Strategy strategy, Var visual, const Batch& batch,
                     std::size_t& count) {
  Var rows = visual;
  count = batch.visual_len;
  if (strategy == Strategy::Cls) {
    rows = ad::slice_segments(visual, batch.visual_len, 0, 1, batch.size);
    count = 1;
  }
  Var y = ad::matmul(rows, tape.param(model.visual_projection.weight));
  return ad::add_bias(y, tape.param(model.visual_projection.bias));
}

Var project_visual(Tape& tape, Model& model, Var visual) {
  Var y = ad::matmul(visual, tape.param(model.visual_projection.weight));
  return ad::add_bias(y, tape.param(model.visual_projection.bias));
}

}  // namespace

ForwardResult forward_with_prompt(Tape& tape, Model& model, const PromptSpec& spec,
                                  const Batch& batch, bool trace_attention) {
  spec.validate(model);
  const std::size_t B = batch.size;
  const std::size_t L = model.spec.text_len;
  const std::size_t M = model.spec.layers;
  const std::size_t N = batch.visual_len;
  if (B < 1 || N < 1) throw Error("forward_with_prompt: empty batch");
  if (batch.visual.rows() != B * N || batch.visual.cols() != model.visual_width) {
    throw Error("forward_with_prompt: visual features " + shape_string(batch.visual.shape()) +
                " are not " + std::to_string(B) + " x " + std::to_string(N) +
                " rows of width " + std::to_string(model.visual_width));
  }

  ForwardResult result;
  AttentionTrace* enc_trace = nullptr;
  AttentionTrace* dec_trace = nullptr;
  if (trace_attention) {
    result.encoder_attention.emplace();
    enc_trace = &*result.encoder_attention;
    if (model.spec.kind == ModelKind::EncoderDecoder) {
      result.decoder_attention.emplace();
      dec_trace = &*result.decoder_attention;
    }
  }

  Var text = embed_text(tape, model, batch.tokens, B);
  Var visual = tape.constant(batch.visual.detached());
  const Strategy strategy = spec.strategy;

  auto make_prompt = [&](Var text_state, Segments seg, std::size_t& q_len) {
    Var query = make_query(model.spec.kind, text_state, seg, strategy);
    q_len = query.rows() / B;
    Tensor probs;
    Var prompt = generate_dvp(tape, model.generators[spec.generator], query,
                              project_visual(tape, model, visual), B, q_len, N,
                              trace_attention ? &probs : nullptr);
    if (trace_attention) {
      result.prompt_attention = average_heads(probs, model.generators[spec.generator].heads, q_len, N);
    }
    return prompt;
  };

  if (model.spec.kind == ModelKind::Encoder) {
    Var cls;
    if (is_dvp(strategy)) {
      const std::size_t K = spec.layer;
      Var x = run_layers(tape, model, Stack::Encoder, text, {B, L}, 1, K - 1, std::nullopt, enc_trace);
      std::size_t q_len = 0;
      Var prompt = make_prompt(x, {B, L}, q_len);
      x = ad::concat_segments(prompt, q_len, x, L, B);
      x = run_layers(tape, model, Stack::Encoder, x, {B, q_len + L}, K, M, std::nullopt, enc_trace);
      cls = ad::slice_segments(x, q_len + L, q_len, 1, B);
      for (std::size_t i = 1; i <= M; ++i) result.encoder_lengths.push_back(i < K ? L : L + q_len);
    } else {
      std::size_t count = 0;
      Var prompts = baseline_prompts(tape, model, strategy, visual, batch, count);
      Var x = ad::concat_segments(prompts, count, text, L, B);
      x = run_layers(tape, model, Stack::Encoder, x, {B, count + L}, 1, M, std::nullopt, enc_trace);
      cls = ad::slice_segments(x, count + L, count, 1, B);
      result.encoder_lengths.assign(M, count + L);
    }
    result.logits = classify(tape, model, cls);
    return result;
  }

  // encoder-decoder
  std::size_t ctx_len = L;
  Var encoder_in = text;
  if (!is_dvp(strategy)) {
    std::size_t count = 0;
    Var prompts = baseline_prompts(tape, model, strategy, visual, batch, count);
    encoder_in = ad::concat_segments(prompts, count, text, L, B);
    ctx_len = count + L;
  }
  Var ctx = run_layers(tape, model, Stack::Encoder, encoder_in, {B, ctx_len}, 1, M, std::nullopt,
                       enc_trace);
  result.encoder_lengths.assign(M, ctx_len);
  const CrossContext cross{ctx, ctx_len};
  Var f = ad::repeat_rows(tape.param(model.decoder_input), B);
  Var out;
  if (is_dvp(strategy)) {
    const std::size_t K = spec.layer;
    f = run_layers(tape, model, Stack::Decoder, f, {B, 1}, 1, K - 1, cross, dec_trace);
    std::size_t q_len = 0;
    Var prompt = make_prompt(ctx, {B, L}, q_len);
    Var y = ad::concat_segments(prompt, q_len, f, 1, B);
    y = run_layers(tape, model, Stack::Decoder, y, {B, q_len + 1}, K, M, cross, dec_trace);
    out = ad::slice_segments(y, q_len + 1, q_len, 1, B);
    for (std::size_t i = 1; i <= M; ++i) result.decoder_lengths.push_back(i < K ? 1 : 1 + q_len);
  } else {
    out = run_layers(tape, model, Stack::Decoder, f, {B, 1}, 1, M, cross, dec_trace);
    result.decoder_lengths.assign(M, 1);
  }
  result.logits = classify(tape, model, out);
  return result;
}

}  // namespace dvp
