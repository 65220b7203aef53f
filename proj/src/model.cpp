// SPDX-License-Identifier: Apache-2.0
#include "dvp/model.hpp"

#include <cmath>

namespace dvp {

namespace {

constexpr double kNormEps = 1e-5;

Tensor uniform_tensor(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
  for (auto& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

std::string to_string(ModelKind kind) {
  return kind == ModelKind::Encoder ? "encoder" : "encoder-decoder";
}

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "encoder") return ModelKind::Encoder;
  if (s == "encoder-decoder") return ModelKind::EncoderDecoder;
  throw Error("unknown model kind '" + s + "' (expected encoder | encoder-decoder)");
}

void ModelSpec::validate() const {
  if (layers < 1) throw Error("model: layers must be >= 1");
  if (width < 1 || heads < 1 || width % heads != 0) {
    throw Error("model: width " + std::to_string(width) + " must be divisible by heads " +
                std::to_string(heads));
  }
  if (ffn_mult < 1) throw Error("model: ffn_mult must be >= 1");
  if (text_len < 1) throw Error("model: text_len must be >= 1");
  if (vocab < 2) throw Error("model: vocab must be >= 2");
  if (num_classes < 1) throw Error("model: num_classes must be >= 1");
}

Linear Linear::create(std::size_t in, std::size_t out, Rng& rng, bool with_bias) {
  Linear l;
  l.weight = uniform_tensor({in, out}, in, rng);
  if (with_bias) l.bias = uniform_tensor({out}, in, rng);
  return l;
}

Norm Norm::create(std::size_t width) { return Norm{Tensor({width}, 1.0), Tensor({width}, 0.0)}; }

PromptGenerator PromptGenerator::create(std::size_t width, std::size_t heads, Rng& rng) {
  if (heads < 1 || width % heads != 0) {
    throw Error("prompt generator: width " + std::to_string(width) +
                " must be divisible by heads " + std::to_string(heads));
  }
  PromptGenerator g;
  g.query = uniform_tensor({width, width}, width, rng);
  g.key = uniform_tensor({width, width}, width, rng);
  g.value = uniform_tensor({width, width}, width, rng);
  g.output = uniform_tensor({width, width}, width, rng);
  g.heads = heads;
  return g;
}

namespace {

AttentionBlock make_attention(std::size_t d, Rng& rng) {
  return AttentionBlock{Linear::create(d, d, rng), Linear::create(d, d, rng),
                        Linear::create(d, d, rng), Linear::create(d, d, rng)};
}

TransformerLayer make_layer(const ModelSpec& spec, bool with_cross, Rng& rng) {
  TransformerLayer layer;
  layer.self_attn = make_attention(spec.width, rng);
  layer.attn_norm = Norm::create(spec.width);
  if (with_cross) {
    layer.cross_attn = make_attention(spec.width, rng);
    layer.cross_norm = Norm::create(spec.width);
  }
  layer.ffn_up = Linear::create(spec.width, spec.ffn_width(), rng);
  layer.ffn_down = Linear::create(spec.ffn_width(), spec.width, rng);
  layer.ffn_norm = Norm::create(spec.width);
  return layer;
}

void visit_linear(const std::string& prefix, Linear& l, const Model::Visitor& fn) {
  fn(prefix + ".weight", l.weight);
  if (!l.bias.empty()) fn(prefix + ".bias", l.bias);
}

void visit_norm(const std::string& prefix, Norm& n, const Model::Visitor& fn) {
  fn(prefix + ".gain", n.gain);
  fn(prefix + ".bias", n.bias);
}

void visit_attention(const std::string& prefix, AttentionBlock& a, const Model::Visitor& fn) {
  visit_linear(prefix + ".query", a.query, fn);
  visit_linear(prefix + ".key", a.key, fn);
  visit_linear(prefix + ".value", a.value, fn);
  visit_linear(prefix + ".output", a.output, fn);
}

void visit_adapter(const std::string& prefix, std::optional<Adapter>& a,
                   const Model::Visitor& fn) {
  if (!a) return;
  fn(prefix + ".down", a->down);
  fn(prefix + ".down_bias", a->down_bias);
  fn(prefix + ".up", a->up);
  fn(prefix + ".up_bias", a->up_bias);
}

void visit_layer(const std::string& prefix, TransformerLayer& layer, const Model::Visitor& fn) {
  visit_attention(prefix + ".attn", layer.self_attn, fn);
  visit_norm(prefix + ".attn_norm", layer.attn_norm, fn);
  visit_adapter(prefix + ".adapter_attn", layer.adapter_attn, fn);
  if (layer.cross_attn) {
    visit_attention(prefix + ".cross", *layer.cross_attn, fn);
    visit_norm(prefix + ".cross_norm", *layer.cross_norm, fn);
    visit_adapter(prefix + ".adapter_cross", layer.adapter_cross, fn);
  }
  visit_linear(prefix + ".ffn.up", layer.ffn_up, fn);
  visit_linear(prefix + ".ffn.down", layer.ffn_down, fn);
  visit_norm(prefix + ".ffn_norm", layer.ffn_norm, fn);
  visit_adapter(prefix + ".adapter_ffn", layer.adapter_ffn, fn);
}

}  // namespace

void Model::visit(const Visitor& fn) {
  fn("embed.token", token_embedding);
  fn("embed.position", position_embedding);
  visit_norm("embed.norm", embed_norm, fn);
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    visit_layer("enc." + std::to_string(i + 1), encoder[i], fn);
  }
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    visit_layer("dec." + std::to_string(i + 1), decoder[i], fn);
  }
  if (!decoder_input.empty()) fn("dec.input", decoder_input);
  visit_linear("head", head, fn);
  visit_linear("visual.proj", visual_projection, fn);
  for (std::size_t i = 0; i < generators.size(); ++i) {
    const std::string p = "dvp." + std::to_string(i + 1);
    fn(p + ".query", generators[i].query);
    fn(p + ".key", generators[i].key);
    fn(p + ".value", generators[i].value);
    fn(p + ".output", generators[i].output);
  }
}

void Model::visit(const ConstVisitor& fn) const {
  const_cast<Model*>(this)->visit(
      Visitor([&](const std::string& name, Tensor& t) { fn(name, t); }));
}

std::size_t Model::adapter_count() const {
  std::size_t n = 0;
  auto count = [&](const std::vector<TransformerLayer>& stack) {
    for (const auto& l : stack) {
      n += l.adapter_attn.has_value() + l.adapter_cross.has_value() + l.adapter_ffn.has_value();
    }
  };
  count(encoder);
  count(decoder);
  return n;
}

Model build_model(const ModelSpec& spec, std::size_t visual_width, std::size_t generators,
                  std::uint64_t seed) {
  spec.validate();
  if (visual_width < 1) throw Error("model: visual feature width must be >= 1");
  Rng rng(seed);
  Model m;
  m.spec = spec;
  m.visual_width = visual_width;
  const std::size_t d = spec.width;
  m.token_embedding = uniform_tensor({spec.vocab, d}, 1, rng);
  m.position_embedding = uniform_tensor({spec.text_len, d}, d, rng);
  m.embed_norm = Norm::create(d);
  for (std::size_t i = 0; i < spec.layers; ++i) m.encoder.push_back(make_layer(spec, false, rng));
  if (spec.kind == ModelKind::EncoderDecoder) {
    for (std::size_t i = 0; i < spec.layers; ++i) m.decoder.push_back(make_layer(spec, true, rng));
    m.decoder_input = uniform_tensor({1, d}, d, rng);
  }
  m.head = Linear::create(d, spec.num_classes, rng);
  m.visual_projection = Linear::create(visual_width, d, rng);
  for (std::size_t i = 0; i < generators; ++i) {
    m.generators.push_back(PromptGenerator::create(d, spec.heads, rng));
  }
  m.visit(Model::Visitor([](const std::string&, Tensor& t) { t.set_requires_grad(true); }));
  return m;
}

namespace {

Var linear(Tape& tape, Linear& l, Var x) {
  Var y = ad::matmul(x, tape.param(l.weight));
  return l.bias.empty() ? y : ad::add_bias(y, tape.param(l.bias));
}

Var norm(Tape& tape, Norm& n, Var x) {
  return ad::layer_norm(x, tape.param(n.gain), tape.param(n.bias), kNormEps);
}

Tensor head_average(const Tensor& probs, std::size_t heads, std::size_t q_len,
                    std::size_t kv_len) {
  Tensor out({q_len, kv_len});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < q_len * kv_len; ++i) out[i] += probs[h * q_len * kv_len + i];
  }
  for (auto& v : out.values()) v /= static_cast<double>(heads);
  return out;
}

Var attend(Tape& tape, AttentionBlock& block, Var x, Var ctx, Segments seg,
           std::size_t ctx_len, std::size_t heads, Tensor* probs) {
  const std::size_t d = x.cols();
  AttentionDims dims{seg.batch, seg.length, ctx_len, d, heads,
                     1.0 / std::sqrt(static_cast<double>(d / heads))};
  Var q = linear(tape, block.query, x);
  Var k = linear(tape, block.key, ctx);
  Var v = linear(tape, block.value, ctx);
  return linear(tape, block.output, ad::attention(q, k, v, dims, probs));
}

Var maybe_adapter(Tape& tape, std::optional<Adapter>& a, Var x) {
  return a ? adapter_forward(tape, *a, x) : x;
}

}  // namespace

Var embed_text(Tape& tape, Model& model, std::span<const int> tokens, std::size_t batch) {
  const std::size_t L = model.spec.text_len;
  if (tokens.size() != batch * L) {
    throw Error("embed_text: expected " + std::to_string(batch * L) + " tokens (" +
                std::to_string(batch) + " x L=" + std::to_string(L) + "), got " +
                std::to_string(tokens.size()));
  }
  Var x = ad::gather_rows(tape.param(model.token_embedding), tokens);
  x = ad::add_periodic(x, tape.param(model.position_embedding));
  return norm(tape, model.embed_norm, x);
}

Var run_layers(Tape& tape, Model& model, Stack stack, Var x, Segments seg, std::size_t from,
               std::size_t to, const std::optional<CrossContext>& cross, AttentionTrace* trace) {
  auto& layers = stack == Stack::Encoder ? model.encoder : model.decoder;
  if (stack == Stack::Decoder && !cross) throw Error("run_layers: decoder needs a cross context");
  if (stack == Stack::Encoder && cross) throw Error("run_layers: encoder takes no cross context");
  if (from > to) return x;
  if (from < 1 || to > layers.size()) {
    throw Error("run_layers: layer range [" + std::to_string(from) + ", " + std::to_string(to) +
                "] outside [1, " + std::to_string(layers.size()) + "]");
  }
  if (x.rows() != seg.rows() || x.cols() != model.spec.width) {
    throw Error("run_layers: input " + shape_string(x.value().shape()) + " is not " +
                std::to_string(seg.batch) + " x " + std::to_string(seg.length) + " rows of width " +
                std::to_string(model.spec.width));
  }
  const std::size_t heads = model.spec.heads;
  if (trace && trace->layers.size() < layers.size()) trace->layers.resize(layers.size());
  for (std::size_t i = from; i <= to; ++i) {
    TransformerLayer& layer = layers[i - 1];
    Tensor probs;
    Var a = attend(tape, layer.self_attn, x, x, seg, seg.length, heads, trace ? &probs : nullptr);
    if (trace) trace->layers[i - 1] = head_average(probs, heads, seg.length, seg.length);
    a = maybe_adapter(tape, layer.adapter_attn, a);
    x = norm(tape, layer.attn_norm, ad::add(x, a));
    if (stack == Stack::Decoder) {
      Var c = attend(tape, *layer.cross_attn, x, cross->states, seg, cross->length, heads, nullptr);
      c = maybe_adapter(tape, layer.adapter_cross, c);
      x = norm(tape, *layer.cross_norm, ad::add(x, c));
    }
    Var f = linear(tape, layer.ffn_down, ad::gelu(linear(tape, layer.ffn_up, x)));
    f = maybe_adapter(tape, layer.adapter_ffn, f);
    x = norm(tape, layer.ffn_norm, ad::add(x, f));
  }
  return x;
}

Var pool(Var x, Segments seg, PoolMode mode) {
  if (seg.length < 1 || seg.batch < 1) throw Error("pool: empty sequence");
  if (mode == PoolMode::Cls) return ad::slice_segments(x, seg.length, 0, 1, seg.batch);
  return ad::mean_segments(x, seg.length, seg.batch);
}

Var classify(Tape& tape, Model& model, Var pooled) {
  if (pooled.cols() != model.spec.width) {
    throw Error("classify: pooled width " + std::to_string(pooled.cols()) +
                " does not match model width " + std::to_string(model.spec.width));
  }
  return linear(tape, model.head, pooled);
}

ParamCount count_params(const Model& model,
                        const std::function<bool(const std::string&)>& trainable) {
  ParamCount c;
  model.visit(Model::ConstVisitor([&](const std::string& name, const Tensor& t) {
    c.total += t.size();
    if (trainable(name)) c.trainable += t.size();
  }));
  return c;
}

ParamCount count_params(const Model& model) {
  ParamCount c;
  model.visit(Model::ConstVisitor([&](const std::string&, const Tensor& t) {
    c.total += t.size();
    if (t.requires_grad()) c.trainable += t.size();
  }));
  return c;
}

ParamCount param_budget(const ModelSpec& spec, std::size_t visual_width,
                        std::size_t generators, std::size_t adapter_width) {
  spec.validate();
  const std::size_t d = spec.width, f = spec.ffn_width(), M = spec.layers;
  const std::size_t norm = 2 * d;
  const std::size_t attention = 4 * (d * d + d);
  const std::size_t ffn = d * f + f + f * d + d;
  const std::size_t adapter =
      adapter_width > 0 ? Adapter::parameter_count(d, adapter_width) : 0;
  const bool ed = spec.kind == ModelKind::EncoderDecoder;

  // Frozen under adapter tuning: embeddings, attention and FFN weights and
  // the decoder input vector.
  std::size_t backbone = spec.vocab * d + spec.text_len * d;
  backbone += M * (attention + ffn);
  if (ed) backbone += M * (2 * attention + ffn) + d;

  std::size_t tuned = norm;  // embedding norm
  tuned += M * (2 * norm + 2 * adapter);
  if (ed) tuned += M * (3 * norm + 3 * adapter);
  tuned += d * spec.num_classes + spec.num_classes;
  tuned += visual_width * d + d;
  tuned += generators * 4 * d * d;

  ParamCount c;
  c.total = backbone + tuned;
  c.trainable = adapter_width > 0 ? tuned : c.total;
  return c;
}

}  // namespace dvp
