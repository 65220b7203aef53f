// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dvp/config.hpp"
#include "dvp/flops.hpp"

namespace dvp {

/// Progress messages go to `log` unless it is null. Result files never
/// contain timings, so reruns with the same config and seed reproduce them
/// byte for byte.
struct RunContext {
  std::ostream* log = nullptr;
};

/// Seeds derived from RunConfig::seed for each consumer.
struct SeedPlan {
  std::uint64_t data;
  std::uint64_t init;
  std::uint64_t train;
  std::uint64_t search;
  static SeedPlan from(std::uint64_t seed);
};

/// Synthetic dataset from cfg.task, or the feature files when configured.
TaskDataset load_dataset(const RunConfig& cfg);

/// Fresh model for the config: `generators` prompt generators, adapters
/// attached when enabled.
Model make_model(const RunConfig& cfg, std::size_t visual_width, std::size_t generators);

/// gen-data: train/val/test feature files and label CSVs.
void run_gen_data(const RunConfig& cfg, const RunContext& ctx = {});

struct TrainSummary {
  std::vector<EpochMetrics> history;
  EvalResult test;  // count 0 when there is no test split
};

/// train: metrics.csv, model.dvpm and config.json in out_dir.
TrainSummary run_train(const RunConfig& cfg, const RunContext& ctx = {});

struct SweepRow {
  std::size_t layer = 0;
  double final_val_acc = 0.0;
  double best_val_acc = 0.0;
  std::uint64_t flops = 0;
};

struct SweepSummary {
  std::vector<SweepRow> rows;
  std::size_t argmax_layer = 0;  // by final val accuracy, ties to the lower layer
};

/// sweep: one dvp-single training run per layer from the same init seed.
/// Writes sweep.csv and layer_K/metrics.csv.
SweepSummary run_sweep(const RunConfig& cfg, const RunContext& ctx = {});

struct SearchSummary {
  SearchResult result;
  std::optional<TrainSummary> final_train;
};

/// search: placement search with the live validation oracle. Writes
/// search_trace.csv and search.csv.
SearchSummary run_search_mode(const RunConfig& cfg, const RunContext& ctx = {});

struct BanditTestSummary {
  std::size_t expected_best = 0;  // argmax of the configured means
  std::vector<std::size_t> best_arms;
  std::vector<double> final_policy_best;  // pi of the expected best arm
  double recovery_rate = 0.0;
};

/// bandit-test: search with a model-free oracle over cfg.bandit.seeds
/// seeds (seed, seed+1, ...). Writes bandit_trace.csv for the first seed
/// and bandit_summary.csv.
BanditTestSummary run_bandit_test(const RunConfig& cfg, const RunContext& ctx = {});

struct FlopsRow {
  Strategy strategy;
  std::size_t layer;
  std::size_t tokens;
  FlopsReport report;
};

/// flops: every strategy and insertion layer for the configured model.
/// Writes flops.csv and flops.txt.
std::vector<FlopsRow> run_flops_report(const RunConfig& cfg, const RunContext& ctx = {});

/// dump-attn: per-layer head-averaged attention maps of one val example.
/// Writes attn/layer_KK.csv for the encoder, attn/decoder_layer_KK.csv for
/// the decoder, attn/prompt.csv for dvp strategies and attn/heatmap.txt.
void run_dump_attn(const RunConfig& cfg, const RunContext& ctx = {});

/// ASCII rendering of a matrix with values in [0, 1].
std::string ascii_heatmap(const Tensor& m);

}  // namespace dvp
