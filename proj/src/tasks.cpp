// SPDX-License-Identifier: Apache-2.0
#include "dvp/tasks.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "dvp/rng.hpp"

namespace dvp {

void SyntheticTaskSpec::validate() const {
  if (prototypes < 1) throw Error("task: need at least one prototype");
  if (prototypes + kFirstSymbolToken > vocab) {
    throw Error("task: " + std::to_string(prototypes) + " prototypes need " +
                std::to_string(prototypes + kFirstSymbolToken) + " vocabulary ids, vocab is " +
                std::to_string(vocab));
  }
  if (num_classes < 1 || num_classes > prototypes) {
    throw Error("task: num_classes must be in [1, prototypes]");
  }
  if (text_len < composition_depth + 2) {
    throw Error("task: text length " + std::to_string(text_len) + " cannot hold [CLS] and " +
                std::to_string(composition_depth + 1) + " symbols");
  }
  if (visual_len < prototypes + 1) {
    throw Error("task: " + std::to_string(visual_len) + " visual rows cannot hold [CLS] and " +
                std::to_string(prototypes) + " prototypes");
  }
  if (visual_width < 2 || visual_width % 2 != 0) throw Error("task: visual width must be even");
  if (!(noise_sigma >= 0.0)) throw Error("task: noise_sigma must be >= 0");
}

namespace {

Tensor unit_rows(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    double norm = 0.0;
    for (auto& v : t.row(r)) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : t.row(r)) v /= norm;
  }
  return t;
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

Example make_example(const SyntheticTaskSpec& spec, const Tensor& prototypes,
                     const Tensor& codes, Rng& rng) {
  const std::size_t C = spec.prototypes;
  const std::size_t half = spec.visual_width / 2;
  Example ex;
  ex.tokens.assign(spec.text_len, kPadToken);
  ex.tokens[0] = kClsToken;

  std::vector<std::size_t> text_slots(spec.text_len - 1);
  std::iota(text_slots.begin(), text_slots.end(), 1);
  shuffle(text_slots, rng);
  std::size_t target = 0;
  for (std::size_t i = 0; i <= spec.composition_depth; ++i) {
    const std::size_t symbol = rng.below(C);
    target = (target + symbol) % C;
    ex.tokens[text_slots[i]] = kFirstSymbolToken + static_cast<int>(symbol);
  }

  std::vector<int> classes(C);
  for (std::size_t i = 0; i < C; ++i) classes[i] = static_cast<int>(rng.below(spec.num_classes));
  std::vector<std::size_t> rows(spec.visual_len - 1);
  std::iota(rows.begin(), rows.end(), 1);
  shuffle(rows, rng);

  ex.visual = Tensor({spec.visual_len, spec.visual_width});
  for (std::size_t p = 0; p < C; ++p) {
    auto row = ex.visual.row(rows[p]);
    for (std::size_t j = 0; j < half; ++j) {
      row[j] = prototypes(p, j);
      row[half + j] = codes(static_cast<std::size_t>(classes[p]), j);
    }
  }
  if (spec.noise_sigma > 0.0) {
    for (std::size_t r = 1; r < spec.visual_len; ++r) {
      for (auto& v : ex.visual.row(r)) v += spec.noise_sigma * rng.normal();
    }
  }
  auto cls = ex.visual.row(0);
  for (std::size_t r = 1; r < spec.visual_len; ++r) {
    for (std::size_t j = 0; j < spec.visual_width; ++j) cls[j] += ex.visual(r, j);
  }
  for (auto& v : cls) v /= static_cast<double>(spec.visual_len - 1);
  ex.label = classes[target];
  return ex;
}

std::vector<Example> make_split(const SyntheticTaskSpec& spec, const Tensor& prototypes,
                                const Tensor& codes, std::size_t count, Rng rng) {
  std::vector<Example> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_example(spec, prototypes, codes, rng));
  return out;
}

}  // namespace

TaskDataset gen_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();
  Rng root(spec.seed);
  Rng shapes = root.fork(1);
  TaskDataset ds;
  ds.visual_len = spec.visual_len;
  ds.visual_width = spec.visual_width;
  ds.text_len = spec.text_len;
  ds.num_classes = spec.num_classes;
  ds.prototypes = unit_rows(spec.prototypes, spec.visual_width / 2, shapes);
  ds.class_codes = unit_rows(spec.num_classes, spec.visual_width / 2, shapes);
  ds.train = make_split(spec, ds.prototypes, ds.class_codes, spec.train_size, root.fork(2));
  ds.val = make_split(spec, ds.prototypes, ds.class_codes, spec.val_size, root.fork(3));
  ds.test = make_split(spec, ds.prototypes, ds.class_codes, spec.test_size, root.fork(4));
  return ds;
}

Batch make_batch(std::span<const Example> examples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw Error("make_batch: no examples");
  const Example& first = examples[indices[0]];
  const std::size_t N = first.visual.rows();
  const std::size_t dv = first.visual.cols();
  const std::size_t L = first.tokens.size();
  Batch b;
  b.size = indices.size();
  b.visual_len = N;
  b.visual = Tensor({b.size * N, dv});
  b.tokens.reserve(b.size * L);
  b.labels.reserve(b.size);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Example& ex = examples[indices[i]];
    if (ex.visual.rows() != N || ex.visual.cols() != dv || ex.tokens.size() != L) {
      throw Error("make_batch: example " + std::to_string(indices[i]) + " has a different shape");
    }
    std::copy(ex.visual.values().begin(), ex.visual.values().end(), b.visual.data() + i * N * dv);
    b.tokens.insert(b.tokens.end(), ex.tokens.begin(), ex.tokens.end());
    b.labels.push_back(ex.label);
  }
  return b;
}

Batch make_batch(std::span<const Example> examples, std::size_t begin, std::size_t count) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), begin);
  return make_batch(examples, idx);
}

namespace {

constexpr std::array<char, 4> kFeatureMagic = {'D', 'V', 'P', 'F'};
constexpr std::uint32_t kFeatureVersion = 1;
constexpr std::size_t kFeatureHeaderBytes = 20;

static_assert(std::endian::native == std::endian::little,
              "feature files are little-endian; add byte swapping for this target");

void put_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(const std::vector<char>& buf, std::size_t offset) {
  std::uint32_t v;
  std::memcpy(&v, buf.data() + offset, sizeof v);
  return v;
}

}  // namespace

void write_features(const std::filesystem::path& path, std::span<const Example> examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  const std::size_t N = examples.empty() ? 0 : examples[0].visual.rows();
  const std::size_t dv = examples.empty() ? 0 : examples[0].visual.cols();
  out.write(kFeatureMagic.data(), kFeatureMagic.size());
  put_u32(out, kFeatureVersion);
  put_u32(out, static_cast<std::uint32_t>(examples.size()));
  put_u32(out, static_cast<std::uint32_t>(N));
  put_u32(out, static_cast<std::uint32_t>(dv));
  for (const auto& ex : examples) {
    if (ex.visual.rows() != N || ex.visual.cols() != dv) {
      throw Error("write_features: examples differ in feature shape");
    }
    for (double v : ex.visual.values()) {
      const float f = static_cast<float>(v);
      out.write(reinterpret_cast<const char*>(&f), sizeof f);
    }
  }
  if (!out) throw Error("write failed for " + path.string());
}

VisualFeatures load_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open feature file " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < kFeatureHeaderBytes) {
    throw Error(path.string() + ": header needs " + std::to_string(kFeatureHeaderBytes) +
                " bytes, file has " + std::to_string(buf.size()));
  }
  if (!std::equal(kFeatureMagic.begin(), kFeatureMagic.end(), buf.begin())) {
    throw Error(path.string() + ": bad magic at byte offset 0 (expected DVPF)");
  }
  const std::uint32_t version = get_u32(buf, 4);
  if (version != kFeatureVersion) {
    throw Error(path.string() + ": unsupported version " + std::to_string(version) +
                " at byte offset 4");
  }
  VisualFeatures f;
  const std::size_t count = get_u32(buf, 8);
  f.visual_len = get_u32(buf, 12);
  f.visual_width = get_u32(buf, 16);
  if (count > 0 && (f.visual_len == 0 || f.visual_width == 0)) {
    throw Error(path.string() + ": zero feature shape at byte offset 12");
  }
  const std::size_t per = f.visual_len * f.visual_width;
  const std::size_t expected = kFeatureHeaderBytes + count * per * sizeof(float);
  if (buf.size() != expected) {
    throw Error(path.string() + ": expected " + std::to_string(expected) + " bytes for " +
                std::to_string(count) + " x " + std::to_string(f.visual_len) + " x " +
                std::to_string(f.visual_width) + " floats, got " + std::to_string(buf.size()) +
                (buf.size() < expected ? " (truncated at byte offset " + std::to_string(buf.size()) + ")"
                                       : " (trailing bytes from offset " + std::to_string(expected) + ")"));
  }
  f.items.reserve(count);
  std::size_t offset = kFeatureHeaderBytes;
  for (std::size_t i = 0; i < count; ++i) {
    Tensor t({f.visual_len, f.visual_width});
    for (std::size_t j = 0; j < per; ++j, offset += sizeof(float)) {
      float v;
      std::memcpy(&v, buf.data() + offset, sizeof v);
      t[j] = v;
    }
    f.items.push_back(std::move(t));
  }
  return f;
}

void write_labels_csv(const std::filesystem::path& path, std::span<const Example> examples) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  const std::size_t L = examples.empty() ? 0 : examples[0].tokens.size();
  out << "example_id,label";
  for (std::size_t i = 0; i < L; ++i) out << ",token_" << i;
  out << '\n';
  for (std::size_t e = 0; e < examples.size(); ++e) {
    out << e << ',' << examples[e].label;
    for (int t : examples[e].tokens) out << ',' << t;
    out << '\n';
  }
}

std::vector<Example> load_examples(const std::filesystem::path& features,
                                   const std::filesystem::path& labels_csv) {
  VisualFeatures f = load_features(features);
  std::ifstream in(labels_csv);
  if (!in) throw Error("cannot open label file " + labels_csv.string());
  std::string line;
  std::getline(in, line);  // header
  std::vector<Example> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<long> values;
    while (std::getline(ss, cell, ',')) {
      try {
        values.push_back(std::stol(cell));
      } catch (const std::exception&) {
        throw Error(labels_csv.string() + ":" + std::to_string(line_no) + ": not an integer: '" +
                    cell + "'");
      }
    }
    if (values.size() < 3) {
      throw Error(labels_csv.string() + ":" + std::to_string(line_no) + ": too few columns");
    }
    const auto id = static_cast<std::size_t>(values[0]);
    if (id >= f.items.size()) {
      throw Error(labels_csv.string() + ":" + std::to_string(line_no) + ": example_id " +
                  std::to_string(id) + " not in feature file (" + std::to_string(f.items.size()) +
                  " examples)");
    }
    Example ex;
    ex.label = static_cast<int>(values[1]);
    ex.tokens.assign(values.begin() + 2, values.end());
    ex.visual = f.items[id];
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

EvalResult evaluate(Model& model, const PromptSpec& spec, std::span<const Example> split,
                    std::size_t batch_size, LossKind loss) {
  if (split.empty()) throw Error("evaluate: empty split");
  if (batch_size < 1) throw Error("evaluate: batch size must be positive");
  EvalResult r;
  double loss_sum = 0.0;
  for (std::size_t begin = 0; begin < split.size(); begin += batch_size) {
    const std::size_t count = std::min(batch_size, split.size() - begin);
    Batch b = make_batch(split, begin, count);
    Tape tape;
    tape.set_grad_enabled(false);
    Var logits = forward_with_prompt(tape, model, spec, b).logits;
    Var l = loss == LossKind::SoftmaxCrossEntropy ? ad::cross_entropy(logits, b.labels)
                                                  : ad::binary_cross_entropy(logits, b.labels);
    loss_sum += l.value()[0] * static_cast<double>(count);
    const auto pred = argmax_rows(logits.value());
    for (std::size_t i = 0; i < count; ++i) r.correct += pred[i] == b.labels[i];
    r.count += count;
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.count);
  r.loss = loss_sum / static_cast<double>(r.count);
  return r;
}

}  // namespace dvp
