// SPDX-License-Identifier: Apache-2.0
#include <cstdlib>
#include <iostream>
#include <string>

#include <omp.h>

#include <CLI11.hpp>

#include "dvp/runner.hpp"

namespace {

void apply_thread_cap() {
  if (const char* env = std::getenv("DVP_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || n < 1) {
      throw dvp::Error("DVP_THREADS must be a positive integer, got '" + std::string(env) + "'");
    }
    omp_set_num_threads(static_cast<int>(n));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Visual prompt tuning: training, placement search and cost accounting"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  long long seed = -1;
  std::string out_dir;
  bool quiet = false;
  app.add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Override the configured seed")->check(CLI::NonNegativeNumber);
  app.add_option("--out", out_dir, "Output directory");
  app.add_flag("--quiet", quiet, "Suppress progress output");

  const char* modes[][2] = {
      {"gen-data", "Write the synthetic dataset as feature files and label CSVs"},
      {"train", "Train with the configured prompt strategy and layer"},
      {"sweep", "Train dvp-single at every configured insertion layer"},
      {"search", "Bandit search over insertion layers with a live validation oracle"},
      {"bandit-test", "Bandit search against a scripted or Bernoulli oracle"},
      {"flops", "Analytic multiply-accumulate report over strategies and layers"},
      {"dump-attn", "Write per-layer attention maps for one validation example"},
  };
  for (const auto& m : modes) app.add_subcommand(m[0], m[1]);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    apply_thread_cap();
    dvp::RunConfig cfg =
        config_path.empty() ? dvp::RunConfig::defaults() : dvp::load_config(config_path);
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (quiet) cfg.quiet = true;
    dvp::RunContext ctx{cfg.quiet ? nullptr : &std::cerr};

    const std::string mode = app.get_subcommands().front()->get_name();
    if (mode == "gen-data") {
      dvp::run_gen_data(cfg, ctx);
    } else if (mode == "train") {
      dvp::run_train(cfg, ctx);
    } else if (mode == "sweep") {
      dvp::run_sweep(cfg, ctx);
    } else if (mode == "search") {
      dvp::run_search_mode(cfg, ctx);
    } else if (mode == "bandit-test") {
      dvp::run_bandit_test(cfg, ctx);
    } else if (mode == "flops") {
      dvp::run_flops_report(cfg, ctx);
    } else if (mode == "dump-attn") {
      dvp::run_dump_attn(cfg, ctx);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
