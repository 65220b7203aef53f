// SPDX-License-Identifier: Apache-2.0
#include "dvp/flops.hpp"

namespace dvp {

void sequence_lengths(const ModelSpec& spec, const PromptSpec& prompt, std::size_t visual_len,
                      std::vector<std::size_t>& encoder, std::vector<std::size_t>& decoder) {
  if (visual_len < 1) throw Error("flops: visual length must be >= 1");
  const std::size_t M = spec.layers;
  const std::size_t L = spec.text_len;
  const std::size_t K = prompt.layer;
  if (K < 1 || K > M) throw Error("flops: insertion layer outside [1, M]");
  std::size_t prompts = 0;
  switch (prompt.strategy) {
    case Strategy::Common: prompts = visual_len; break;
    case Strategy::Cls: prompts = 1; break;
    case Strategy::DvpSingle: prompts = 1; break;
    case Strategy::DvpMulti: prompts = L; break;
  }
  encoder.clear();
  decoder.clear();
  if (spec.kind == ModelKind::Encoder) {
    for (std::size_t i = 1; i <= M; ++i) {
      encoder.push_back(is_dvp(prompt.strategy) ? (i < K ? L : L + prompts) : L + prompts);
    }
    return;
  }
  for (std::size_t i = 1; i <= M; ++i) {
    encoder.push_back(is_dvp(prompt.strategy) ? L : L + prompts);
    decoder.push_back(is_dvp(prompt.strategy) && i >= K ? 1 + prompts : 1);
  }
}

namespace {

struct Counts {
  std::uint64_t projections = 0;
  std::uint64_t scores = 0;
  std::uint64_t prompt = 0;
  std::uint64_t head = 0;
  std::vector<std::size_t> enc;
  std::vector<std::size_t> dec;
  std::uint64_t total() const { return projections + scores + prompt + head; }
};

Counts count(const ModelSpec& spec, const PromptSpec& prompt, std::size_t N, std::size_t dv) {
  Counts c;
  sequence_lengths(spec, prompt, N, c.enc, c.dec);
  const std::uint64_t d = spec.width;
  const std::uint64_t f = spec.ffn_mult;
  for (std::uint64_t S : c.enc) {
    c.projections += S * (4 * d * d + 2 * f * d * d);
    c.scores += 2 * S * S * d;
  }
  const std::uint64_t ctx = c.enc.empty() ? 0 : c.enc.back();
  for (std::uint64_t S : c.dec) {
    c.projections += S * (4 * d * d + 2 * f * d * d);
    c.scores += 2 * S * S * d;
    c.projections += 2 * S * d * d + 2 * ctx * d * d;
    c.scores += 2 * S * ctx * d;
  }
  const std::uint64_t L = spec.text_len;
  switch (prompt.strategy) {
    case Strategy::Common: c.prompt = N * dv * d; break;
    case Strategy::Cls: c.prompt = dv * d; break;
    case Strategy::DvpSingle:
    case Strategy::DvpMulti: {
      const std::uint64_t q = prompt.strategy == Strategy::DvpSingle ? 1 : L;
      c.prompt = N * dv * d + 2 * q * d * d + 2 * N * d * d + 2 * q * N * d;
      break;
    }
  }
  c.head = d * spec.num_classes;
  return c;
}

}  // namespace

FlopsReport estimate_flops(const ModelSpec& spec, const PromptSpec& prompt,
                           std::size_t visual_len, std::size_t visual_width) {
  spec.validate();
  const std::size_t dv = visual_width == 0 ? spec.width : visual_width;
  Counts c = count(spec, prompt, visual_len, dv);
  Counts common = count(spec, PromptSpec{Strategy::Common, 1, 0}, visual_len, dv);
  FlopsReport r;
  r.encoder_lengths = std::move(c.enc);
  r.decoder_lengths = std::move(c.dec);
  r.projections = c.projections;
  r.scores = c.scores;
  r.prompt = c.prompt;
  r.head = c.head;
  r.total = c.total();
  r.common_total = common.total();
  r.ratio = static_cast<double>(r.total) / static_cast<double>(r.common_total);
  return r;
}

}  // namespace dvp
