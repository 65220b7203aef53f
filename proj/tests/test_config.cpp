// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <set>

#include "dvp/checkpoint.hpp"
#include "dvp/config.hpp"
#include "dvp/runner.hpp"
#include "helpers.hpp"

using namespace dvp;
using dvp::test::max_abs_diff;
using dvp::test::scratch_dir;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_config(text).validate();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("defaults are valid and survive a dump/parse round trip") {
  const RunConfig d = RunConfig::defaults();
  CHECK_NOTHROW(d.validate());
  const std::string text = dump_config(d);
  CHECK(dump_config(parse_config(text)) == text);
  CHECK(dump_config(parse_config("{}")) == text);
}

TEST_CASE("a partial config overrides only the named fields") {
  const RunConfig c = parse_config(R"({
    "seed": 9,
    "model": {"kind": "encoder-decoder", "layers": 4},
    "prompt": {"strategy": "dvp-multi", "layer": 2},
    "train": {"optimizer": {"kind": "sgd", "lr": 0.2}},
    "sweep": {"layers": [1, 3]},
    "search": {"samples": 3}
  })");
  CHECK(c.seed == 9);
  CHECK(c.model.kind == ModelKind::EncoderDecoder);
  CHECK(c.model.layers == 4);
  CHECK(c.model.width == RunConfig::defaults().model.width);
  CHECK(c.prompt.strategy == Strategy::DvpMulti);
  CHECK(c.train.optimizer.kind == OptimizerKind::Sgd);
  CHECK(c.train.optimizer.lr == 0.2);
  CHECK(c.sweep.layers == std::vector<std::size_t>{1, 3});
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("config errors name the field path") {
  CHECK(error_of(R"({"train": {"optimizer": {"lr": "fast"}}})").find("config.train.optimizer.lr") != std::string::npos);
  CHECK(error_of(R"({"model": {"widht": 3}})").find("config.model.widht") != std::string::npos);
  CHECK(error_of(R"({"bogus": 1})").find("config.bogus") != std::string::npos);
  CHECK(error_of(R"({"prompt": {"layer": 9}})").find("config.prompt.layer") != std::string::npos);
  CHECK(error_of(R"({"prompt": {"strategy": "cls", "layer": 2}})").find("config.prompt.layer") != std::string::npos);
  CHECK(error_of(R"({"model": {"heads": 5}})").find("config.model") != std::string::npos);
  CHECK(error_of(R"({"model": {"num_classes": 4}})").find("config.model.num_classes") != std::string::npos);
  CHECK(error_of(R"({"adapter": {"enabled": true, "hidden": 64}})").find("config.adapter.hidden") != std::string::npos);
  CHECK(error_of(R"({"sweep": {"layers": [1, 7]}})").find("config.sweep.layers[1]") != std::string::npos);
  CHECK(error_of(R"({"bandit_test": {"means": [0.5, 1.5]}})").find("config.bandit_test.means[1]") != std::string::npos);
  CHECK(error_of(R"({"seed": -1})").find("config.seed") != std::string::npos);
  CHECK(error_of(R"({"features": {"train": {"features": "/nonexistent.dvpf", "labels": "x.csv"}, "val": {"features": "a", "labels": "b"}}})")
            .find("config.features.train.features") != std::string::npos);
  CHECK_FALSE(error_of("{not json").empty());
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), Error);
}

TEST_CASE("seed plan gives distinct streams per consumer") {
  const SeedPlan a = SeedPlan::from(0);
  const SeedPlan b = SeedPlan::from(1);
  const std::set<std::uint64_t> all{a.data, a.init, a.train, a.search, b.data, b.init, b.train, b.search};
  CHECK(all.size() == 8);
  CHECK(SeedPlan::from(0).init == a.init);
}

TEST_CASE("checkpoints restore every tensor exactly") {
  const auto dir = scratch_dir("checkpoint");
  for (bool adapters : {false, true}) {
    for (ModelKind kind : {ModelKind::Encoder, ModelKind::EncoderDecoder}) {
      RunConfig cfg = RunConfig::defaults();
      cfg.model.kind = kind;
      cfg.model.layers = 2;
      cfg.adapter.enabled = adapters;
      Model m = make_model(cfg, 12, 2);
      // Perturb the zero-initialized tensors so the round trip is not trivial.
      Rng rng(1);
      m.visit([&](const std::string&, Tensor& t) {
        for (auto& v : t.values()) v += 1e-3 * rng.normal();
      });
      save_checkpoint(dir / "m.dvpm", m);
      Model r = load_checkpoint(dir / "m.dvpm");
      CHECK(r.spec == m.spec);
      CHECK(r.visual_width == 12);
      CHECK(r.generators.size() == 2);
      CHECK(r.adapter_count() == m.adapter_count());
      std::vector<std::pair<std::string, Tensor>> a, b;
      m.visit([&](const std::string& n, Tensor& t) { a.emplace_back(n, t.detached()); });
      r.visit([&](const std::string& n, Tensor& t) { b.emplace_back(n, t.detached()); });
      REQUIRE(a.size() == b.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].first == b[i].first);
        CHECK(a[i].second == b[i].second);
      }
      CHECK(count_params(r).trainable == count_params(m).trainable);
    }
  }
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto dir = scratch_dir("checkpoint_bad");
  RunConfig cfg = RunConfig::defaults();
  cfg.model.layers = 1;
  Model m = make_model(cfg, 8, 1);
  save_checkpoint(dir / "m.dvpm", m);
  const std::string bytes = dvp::test::read_file(dir / "m.dvpm");
  auto write = [&](const std::string& content) {
    std::ofstream(dir / "bad.dvpm", std::ios::binary) << content;
    return dir / "bad.dvpm";
  };
  CHECK_THROWS_AS(load_checkpoint(write(bytes.substr(0, bytes.size() / 2))), Error);
  CHECK_THROWS_AS(load_checkpoint(write("XVPM" + bytes.substr(4))), Error);
  CHECK_THROWS_AS(load_checkpoint(write(bytes + "extra")), Error);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.dvpm"), Error);
}
