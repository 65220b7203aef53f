// SPDX-License-Identifier: Apache-2.0
#include "dvp/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace dvp {

using nlohmann::json;

RunConfig RunConfig::defaults() {
  RunConfig c;
  c.model.kind = ModelKind::Encoder;
  c.model.layers = 6;
  c.model.width = 64;
  c.model.heads = 4;
  c.model.ffn_mult = 4;
  c.model.vocab = 64;
  c.model.text_len = 8;
  c.model.num_classes = 8;
  // Shallow composition and 16 visual rows keep a full sweep plus search
  // within a few minutes on one core while the layers still separate.
  c.task.visual_len = 16;
  c.task.composition_depth = 0;
  c.task.train_size = 1600;
  c.task.val_size = 500;
  c.task.test_size = 500;
  c.train.epochs = 8;
  c.train.batch_size = 32;
  c.train.warmup_epochs = 1.0;
  // Plain SGD stays on the initial plateau for this task; AdamW escapes it.
  c.train.optimizer.kind = OptimizerKind::AdamW;
  c.train.optimizer.lr = 1e-3;
  c.search.epochs = 30;
  c.search.val_batch = 16;
  return c;
}

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& msg) {
  throw Error(path + ": " + msg);
}

/// Reads the keys of one JSON object and rejects any it did not consume.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_, "expected an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) fail(path_ + "." + key, "unknown key");
    }
  }

  std::string path(const std::string& key) const { return path_ + "." + key; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const std::string& key, std::size_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer() || v->get<long long>() < 0) {
        fail(path(key), "expected a non-negative integer");
      }
      out = v->get<std::size_t>();
    }
  }
  void get(const std::string& key, std::uint64_t& out, int) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0)) {
        fail(path(key), "expected a non-negative integer");
      }
      out = v->get<std::uint64_t>();
    }
  }
  void get(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) fail(path(key), "expected a number");
      out = v->get<double>();
    }
  }
  void get(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(path(key), "expected true or false");
      out = v->get<bool>();
    }
  }
  void get(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(path(key), "expected a string");
      out = v->get<std::string>();
    }
  }
  void get(const std::string& key, std::filesystem::path& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(path(key), "expected a string");
      out = v->get<std::string>();
    }
  }
  template <typename Parse>
  void get_enum(const std::string& key, Parse parse) {
    std::string s;
    get(key, s);
    if (s.empty()) return;
    try {
      parse(s);
    } catch (const Error& e) {
      fail(path(key), e.what());
    }
  }
  void get(const std::string& key, std::vector<std::size_t>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) fail(path(key), "expected an array of integers");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        const json& e = (*v)[i];
        if (!e.is_number_integer() || e.get<long long>() < 0) {
          fail(path(key) + "[" + std::to_string(i) + "]", "expected a non-negative integer");
        }
        out.push_back(e.get<std::size_t>());
      }
    }
  }
  void get(const std::string& key, std::vector<double>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) fail(path(key), "expected an array of numbers");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        if (!(*v)[i].is_number()) fail(path(key) + "[" + std::to_string(i) + "]", "expected a number");
        out.push_back((*v)[i].get<double>());
      }
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_split(Section& parent, const std::string& key, FeatureSplit& out, bool& present) {
  present = false;
  if (const json* v = parent.find(key)) {
    Section s(*v, parent.path(key));
    s.get("features", out.features);
    s.get("labels", out.labels);
    if (out.features.empty()) fail(s.path("features"), "required");
    if (out.labels.empty()) fail(s.path("labels"), "required");
    present = true;
  }
}

void apply_json(const json& root, RunConfig& c) {
  Section top(root, "config");
  top.get("seed", c.seed, 0);
  top.get("out_dir", c.out_dir);
  top.get("quiet", c.quiet);

  if (const json* v = top.find("model")) {
    Section s(*v, "config.model");
    s.get_enum("kind", [&](const std::string& k) { c.model.kind = model_kind_from_string(k); });
    s.get("layers", c.model.layers);
    s.get("width", c.model.width);
    s.get("heads", c.model.heads);
    s.get("ffn_mult", c.model.ffn_mult);
    s.get("vocab", c.model.vocab);
    s.get("text_len", c.model.text_len);
    s.get("num_classes", c.model.num_classes);
  }
  if (const json* v = top.find("prompt")) {
    Section s(*v, "config.prompt");
    s.get_enum("strategy", [&](const std::string& k) { c.prompt.strategy = strategy_from_string(k); });
    s.get("layer", c.prompt.layer);
  }
  if (const json* v = top.find("task")) {
    Section s(*v, "config.task");
    s.get("visual_len", c.task.visual_len);
    s.get("visual_width", c.task.visual_width);
    s.get("text_len", c.task.text_len);
    s.get("vocab", c.task.vocab);
    s.get("prototypes", c.task.prototypes);
    s.get("num_classes", c.task.num_classes);
    s.get("composition_depth", c.task.composition_depth);
    s.get("noise_sigma", c.task.noise_sigma);
    s.get("train_size", c.task.train_size);
    s.get("val_size", c.task.val_size);
    s.get("test_size", c.task.test_size);
  }
  if (const json* v = top.find("features")) {
    Section s(*v, "config.features");
    FeatureSource src;
    bool have = false;
    read_split(s, "train", src.train, have);
    if (!have) fail("config.features.train", "required");
    read_split(s, "val", src.val, have);
    if (!have) fail("config.features.val", "required");
    FeatureSplit test;
    read_split(s, "test", test, have);
    if (have) src.test = test;
    c.features = src;
  }
  if (const json* v = top.find("train")) {
    Section s(*v, "config.train");
    s.get("epochs", c.train.epochs);
    s.get("batch_size", c.train.batch_size);
    s.get("warmup_epochs", c.train.warmup_epochs);
    s.get("eval_batch", c.train.eval_batch);
    s.get_enum("loss", [&](const std::string& k) {
      if (k == "softmax") c.train.loss = LossKind::SoftmaxCrossEntropy;
      else if (k == "bce") c.train.loss = LossKind::BinaryCrossEntropy;
      else throw Error("unknown loss '" + k + "' (expected softmax | bce)");
    });
    if (const json* o = s.find("optimizer")) {
      Section os(*o, "config.train.optimizer");
      auto& oc = c.train.optimizer;
      os.get_enum("kind", [&](const std::string& k) { oc.kind = optimizer_from_string(k); });
      os.get("lr", oc.lr);
      os.get("momentum", oc.momentum);
      os.get("beta1", oc.beta1);
      os.get("beta2", oc.beta2);
      os.get("eps", oc.eps);
      os.get("weight_decay", oc.weight_decay);
    }
  }
  if (const json* v = top.find("adapter")) {
    Section s(*v, "config.adapter");
    s.get("enabled", c.adapter.enabled);
    s.get("hidden", c.adapter.hidden);
  }
  if (const json* v = top.find("sweep")) {
    Section s(*v, "config.sweep");
    s.get("layers", c.sweep.layers);
  }
  if (const json* v = top.find("search")) {
    Section s(*v, "config.search");
    s.get("samples", c.search.samples);
    s.get("alpha", c.search.alpha);
    s.get("epochs", c.search.epochs);
    s.get("steps", c.search.steps);
    s.get("val_batch", c.search.val_batch);
    s.get("final_train", c.search.final_train);
  }
  if (const json* v = top.find("bandit_test")) {
    Section s(*v, "config.bandit_test");
    s.get("means", c.bandit.means);
    s.get_enum("oracle", [&](const std::string& k) {
      if (k == "scripted") c.bandit.oracle = BanditOracleKind::Scripted;
      else if (k == "bernoulli") c.bandit.oracle = BanditOracleKind::Bernoulli;
      else throw Error("unknown oracle '" + k + "' (expected scripted | bernoulli)");
    });
    s.get("seeds", c.bandit.seeds);
    s.get("steps", c.bandit.steps);
    s.get("samples", c.bandit.samples);
    s.get("alpha", c.bandit.alpha);
  }
  if (const json* v = top.find("flops")) {
    Section s(*v, "config.flops");
    s.get("visual_len", c.flops.visual_len);
    s.get("visual_width", c.flops.visual_width);
  }
  if (const json* v = top.find("dump_attn")) {
    Section s(*v, "config.dump_attn");
    s.get("checkpoint", c.dump_attn.checkpoint);
    s.get("example", c.dump_attn.example);
  }
}

void require_file(const std::filesystem::path& p, const std::string& field) {
  if (!std::filesystem::is_regular_file(p)) fail(field, "file not found: " + p.string());
}

}  // namespace

void RunConfig::validate() const {
  auto wrap = [](const std::string& path, auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      fail(path, e.what());
    }
  };
  wrap("config.model", [&] { model.validate(); });
  if (prompt.layer < 1 || prompt.layer > model.layers) {
    fail("config.prompt.layer", "must be in [1, " + std::to_string(model.layers) + "]");
  }
  if (!is_dvp(prompt.strategy) && prompt.layer != 1) {
    fail("config.prompt.layer", to_string(prompt.strategy) + " prompting requires layer 1");
  }
  if (features) {
    require_file(features->train.features, "config.features.train.features");
    require_file(features->train.labels, "config.features.train.labels");
    require_file(features->val.features, "config.features.val.features");
    require_file(features->val.labels, "config.features.val.labels");
    if (features->test) {
      require_file(features->test->features, "config.features.test.features");
      require_file(features->test->labels, "config.features.test.labels");
    }
  } else {
    wrap("config.task", [&] { task.validate(); });
    if (task.text_len != model.text_len) {
      fail("config.model.text_len", "must equal config.task.text_len (" +
                                        std::to_string(task.text_len) + ")");
    }
    if (task.vocab > model.vocab) {
      fail("config.model.vocab", "must be >= config.task.vocab (" + std::to_string(task.vocab) + ")");
    }
    if (task.num_classes != model.num_classes) {
      fail("config.model.num_classes", "must equal config.task.num_classes (" +
                                           std::to_string(task.num_classes) + ")");
    }
  }
  wrap("config.train", [&] { train.validate(); });
  if (adapter.enabled && adapter.hidden >= model.width) {
    fail("config.adapter.hidden", "must be below the model width " + std::to_string(model.width) + " (0 selects d/8)");
  }
  for (std::size_t i = 0; i < sweep.layers.size(); ++i) {
    if (sweep.layers[i] < 1 || sweep.layers[i] > model.layers) {
      fail("config.sweep.layers[" + std::to_string(i) + "]",
           "must be in [1, " + std::to_string(model.layers) + "]");
    }
  }
  if (search.samples < 1 || search.samples > model.layers) {
    fail("config.search.samples", "must be in [1, " + std::to_string(model.layers) + "]");
  }
  if (!(search.alpha >= 0.0)) fail("config.search.alpha", "must be >= 0");
  if (search.val_batch < 1) fail("config.search.val_batch", "must be >= 1");
  if (!features && search.val_batch > task.val_size) {
    fail("config.search.val_batch", "exceeds config.task.val_size");
  }
  if (bandit.means.empty()) fail("config.bandit_test.means", "must not be empty");
  for (std::size_t i = 0; i < bandit.means.size(); ++i) {
    if (!(bandit.means[i] >= 0.0 && bandit.means[i] <= 1.0)) {
      fail("config.bandit_test.means[" + std::to_string(i) + "]", "must be in [0, 1]");
    }
  }
  if (bandit.samples < 1 || bandit.samples > bandit.means.size()) {
    fail("config.bandit_test.samples",
         "must be in [1, " + std::to_string(bandit.means.size()) + "]");
  }
  if (bandit.seeds < 1) fail("config.bandit_test.seeds", "must be >= 1");
  if (!(bandit.alpha >= 0.0)) fail("config.bandit_test.alpha", "must be >= 0");
  if (flops.visual_len < 1) fail("config.flops.visual_len", "must be >= 1");
  if (!dump_attn.checkpoint.empty()) require_file(dump_attn.checkpoint, "config.dump_attn.checkpoint");
}

RunConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw Error(std::string("config: ") + e.what());
  }
  RunConfig c = RunConfig::defaults();
  apply_json(root, c);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

std::string dump_config(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir.string();
  j["model"] = {{"kind", to_string(c.model.kind)},      {"layers", c.model.layers},
                {"width", c.model.width},               {"heads", c.model.heads},
                {"ffn_mult", c.model.ffn_mult},         {"vocab", c.model.vocab},
                {"text_len", c.model.text_len},         {"num_classes", c.model.num_classes}};
  j["prompt"] = {{"strategy", to_string(c.prompt.strategy)}, {"layer", c.prompt.layer}};
  if (c.features) {
    auto split = [](const FeatureSplit& s) {
      return json{{"features", s.features.string()}, {"labels", s.labels.string()}};
    };
    j["features"] = {{"train", split(c.features->train)}, {"val", split(c.features->val)}};
    if (c.features->test) j["features"]["test"] = split(*c.features->test);
  } else {
    const auto& t = c.task;
    j["task"] = {{"visual_len", t.visual_len},   {"visual_width", t.visual_width},
                 {"text_len", t.text_len},       {"vocab", t.vocab},
                 {"prototypes", t.prototypes},   {"num_classes", t.num_classes},
                 {"composition_depth", t.composition_depth},
                 {"noise_sigma", t.noise_sigma}, {"train_size", t.train_size},
                 {"val_size", t.val_size},       {"test_size", t.test_size}};
  }
  const auto& o = c.train.optimizer;
  j["train"] = {{"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"warmup_epochs", c.train.warmup_epochs},
                {"eval_batch", c.train.eval_batch},
                {"loss", c.train.loss == LossKind::SoftmaxCrossEntropy ? "softmax" : "bce"},
                {"optimizer",
                 {{"kind", to_string(o.kind)},
                  {"lr", o.lr},
                  {"momentum", o.momentum},
                  {"beta1", o.beta1},
                  {"beta2", o.beta2},
                  {"eps", o.eps},
                  {"weight_decay", o.weight_decay}}}};
  j["adapter"] = {{"enabled", c.adapter.enabled}, {"hidden", c.adapter.hidden}};
  j["sweep"] = {{"layers", c.sweep.layers}};
  j["search"] = {{"samples", c.search.samples},     {"alpha", c.search.alpha},
                 {"epochs", c.search.epochs},       {"steps", c.search.steps},
                 {"val_batch", c.search.val_batch}, {"final_train", c.search.final_train}};
  j["bandit_test"] = {
      {"means", c.bandit.means},
      {"oracle", c.bandit.oracle == BanditOracleKind::Scripted ? "scripted" : "bernoulli"},
      {"seeds", c.bandit.seeds},
      {"steps", c.bandit.steps},
      {"samples", c.bandit.samples},
      {"alpha", c.bandit.alpha}};
  j["flops"] = {{"visual_len", c.flops.visual_len}, {"visual_width", c.flops.visual_width}};
  j["dump_attn"] = {{"checkpoint", c.dump_attn.checkpoint.string()},
                    {"example", c.dump_attn.example}};
  return j.dump(2) + "\n";
}

}  // namespace dvp
