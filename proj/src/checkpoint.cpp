// SPDX-License-Identifier: Apache-2.0
#include "dvp/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <map>

#include "dvp/adapter.hpp"

namespace dvp {

namespace {

constexpr std::array<char, 4> kMagic = {'D', 'V', 'P', 'M'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoints are little-endian; add byte swapping for this target");

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

  template <typename T>
  T get(const char* what) {
    T v;
    in_.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in_) fail(std::string("truncated while reading ") + what);
    offset_ += sizeof v;
    return v;
  }

  void bytes(char* dst, std::size_t n, const char* what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (!in_) fail(std::string("truncated while reading ") + what);
    offset_ += n;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw Error(path_ + ": " + msg + " at byte offset " + std::to_string(offset_));
  }

 private:
  std::istream& in_;
  std::string path_;
  std::size_t offset_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kVersion);
  const ModelSpec& s = model.spec;
  put<std::uint32_t>(out, s.kind == ModelKind::Encoder ? 0 : 1);
  for (std::size_t v : {s.layers, s.width, s.heads, s.ffn_mult, s.vocab, s.text_len,
                        s.num_classes, model.visual_width, model.generators.size(),
                        model.adapter_width}) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  }
  std::uint32_t count = 0;
  model.visit([&](const std::string&, const Tensor&) { ++count; });
  put<std::uint32_t>(out, count);
  model.visit([&](const std::string& name, const Tensor& t) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.values().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  });
  if (!out) throw Error("write failed for " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  Reader r(in, path.string());
  std::array<char, 4> magic{};
  r.bytes(magic.data(), magic.size(), "magic");
  if (magic != kMagic) r.fail("bad magic (expected DVPM)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) r.fail("unsupported version " + std::to_string(version));
  ModelSpec s;
  const auto kind = r.get<std::uint32_t>("kind");
  if (kind > 1) r.fail("bad model kind " + std::to_string(kind));
  s.kind = kind == 0 ? ModelKind::Encoder : ModelKind::EncoderDecoder;
  s.layers = r.get<std::uint32_t>("layers");
  s.width = r.get<std::uint32_t>("width");
  s.heads = r.get<std::uint32_t>("heads");
  s.ffn_mult = r.get<std::uint32_t>("ffn_mult");
  s.vocab = r.get<std::uint32_t>("vocab");
  s.text_len = r.get<std::uint32_t>("text_len");
  s.num_classes = r.get<std::uint32_t>("num_classes");
  const std::size_t visual_width = r.get<std::uint32_t>("visual_width");
  const std::size_t generators = r.get<std::uint32_t>("generator count");
  const std::size_t adapter_width = r.get<std::uint32_t>("adapter width");

  Model model = build_model(s, visual_width, generators, 0);
  if (adapter_width > 0) {
    Rng rng(0);
    attach_adapters(model, adapter_width, rng);
  }
  std::map<std::string, Tensor*> slots;
  model.visit([&](const std::string& name, Tensor& t) { slots[name] = &t; });

  const auto count = r.get<std::uint32_t>("tensor count");
  if (count != slots.size()) {
    r.fail("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
           std::to_string(slots.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>("name length");
    if (len > 4096) r.fail("implausible name length " + std::to_string(len));
    std::string name(len, '\0');
    r.bytes(name.data(), len, "tensor name");
    auto it = slots.find(name);
    if (it == slots.end()) r.fail("unknown tensor '" + name + "'");
    Tensor& t = *it->second;
    const auto rank = r.get<std::uint32_t>("rank");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>("dimension"));
    if (shape != t.shape()) {
      r.fail("tensor '" + name + "' has shape " + shape_string(shape) + ", model expects " +
             shape_string(t.shape()));
    }
    r.bytes(reinterpret_cast<char*>(t.values().data()), t.size() * sizeof(double),
            "tensor values");
    slots.erase(it);
  }
  if (in.peek() != std::char_traits<char>::eof()) r.fail("trailing bytes");
  return model;
}

}  // namespace dvp
