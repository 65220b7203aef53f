// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dvp/bandit.hpp"
#include "dvp/tasks.hpp"
#include "dvp/training.hpp"

namespace dvp {

struct FeatureSplit {
  std::filesystem::path features;
  std::filesystem::path labels;
};

/// Precomputed visual features used instead of the synthetic task.
struct FeatureSource {
  FeatureSplit train;
  FeatureSplit val;
  std::optional<FeatureSplit> test;
};

struct AdapterConfig {
  bool enabled = false;
  std::size_t hidden = 0;  // d_h; 0 means d/8
};

struct SweepConfig {
  std::vector<std::size_t> layers;  // empty: 1..M
};

struct SearchRunConfig {
  std::size_t samples = 5;  // n
  double alpha = 5e-3;
  std::size_t epochs = 2;   // steps = epochs * batches per epoch unless steps > 0
  std::size_t steps = 0;
  std::size_t val_batch = 64;
  /// After the search, retrain a fresh model at the chosen layer.
  bool final_train = false;
};

enum class BanditOracleKind { Scripted, Bernoulli };

struct BanditTestConfig {
  std::vector<double> means{0.5, 0.5, 0.8, 0.5, 0.5};
  BanditOracleKind oracle = BanditOracleKind::Scripted;
  std::size_t seeds = 50;
  std::size_t steps = 2000;
  std::size_t samples = 5;
  double alpha = 5e-3;
};

struct FlopsConfig {
  std::size_t visual_len = 197;
  std::size_t visual_width = 0;  // 0: same as model width
};

struct DumpAttnConfig {
  std::filesystem::path checkpoint;  // empty: train first using the train section
  std::size_t example = 0;           // index into the val split
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "out";
  bool quiet = false;
  ModelSpec model;
  PromptSpec prompt{Strategy::DvpSingle, 4, 0};
  SyntheticTaskSpec task;
  std::optional<FeatureSource> features;
  TrainConfig train;
  AdapterConfig adapter;
  SweepConfig sweep;
  SearchRunConfig search;
  BanditTestConfig bandit;
  FlopsConfig flops;
  DumpAttnConfig dump_attn;

  /// Desk-scale defaults. Valid without a config file.
  static RunConfig defaults();

  /// Cross-field checks. Errors name the offending field path.
  void validate() const;
};

/// Parses a JSON document on top of RunConfig::defaults(). Unknown keys and
/// type mismatches are errors naming the field path, e.g.
/// "config.train.optimizer.lr: expected a number".
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::filesystem::path& path);

/// Canonical JSON of the full configuration, written next to run outputs.
std::string dump_config(const RunConfig& cfg);

}  // namespace dvp
