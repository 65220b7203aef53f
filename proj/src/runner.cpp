// SPDX-License-Identifier: Apache-2.0
#include "dvp/runner.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "dvp/adapter.hpp"
#include "dvp/checkpoint.hpp"

namespace dvp {

namespace fs = std::filesystem;

SeedPlan SeedPlan::from(std::uint64_t seed) {
  return SeedPlan{seed, Rng::mix(seed ^ 0x696e6974ULL), Rng::mix(seed ^ 0x747261696eULL),
                  Rng::mix(seed ^ 0x736561726368ULL)};
}

namespace {

void log(const RunContext& ctx, const std::string& msg) {
  if (ctx.log) *ctx.log << msg << '\n' << std::flush;
}

std::ofstream open_out(const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << std::setprecision(10);
  return out;
}

void write_config(const RunConfig& cfg) {
  auto out = open_out(cfg.out_dir / "config.json");
  out << dump_config(cfg);
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ";" : "") + std::to_string(v[i]);
  return s;
}

void write_metrics(const fs::path& path, const std::vector<EpochMetrics>& history) {
  auto out = open_out(path);
  out << "# dvp train metrics v1\n";
  out << "epoch,train_loss,train_acc,val_loss,val_acc\n";
  for (const auto& m : history) {
    out << m.epoch << ',' << m.train_loss << ',' << m.train_acc << ',' << m.val_loss << ','
        << m.val_acc << '\n';
  }
}

std::string epoch_line(const EpochMetrics& m) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << "epoch " << m.epoch << " train_loss " << m.train_loss
    << " train_acc " << m.train_acc << " val_loss " << m.val_loss << " val_acc " << m.val_acc;
  return s.str();
}

std::size_t generators_for(const PromptSpec& p) { return is_dvp(p.strategy) ? 1 : 0; }

TrainSummary train_with(const RunConfig& cfg, const PromptSpec& prompt, const TaskDataset& data,
                        Model& model, const RunContext& ctx, const std::string& tag) {
  TrainConfig tc = cfg.train;
  tc.seed = SeedPlan::from(cfg.seed).train;
  TrainSummary s;
  s.history = train_model(model, prompt, data, tc, [&](const EpochMetrics& m) {
    log(ctx, tag + epoch_line(m));
  });
  if (!data.test.empty()) s.test = evaluate(model, prompt, data.test, tc.eval_batch, tc.loss);
  return s;
}

}  // namespace

TaskDataset load_dataset(const RunConfig& cfg) {
  if (!cfg.features) {
    SyntheticTaskSpec t = cfg.task;
    t.seed = SeedPlan::from(cfg.seed).data;
    return gen_synthetic(t);
  }
  TaskDataset d;
  d.train = load_examples(cfg.features->train.features, cfg.features->train.labels);
  d.val = load_examples(cfg.features->val.features, cfg.features->val.labels);
  if (cfg.features->test) {
    d.test = load_examples(cfg.features->test->features, cfg.features->test->labels);
  }
  if (d.train.empty() || d.val.empty()) throw Error("features: train and val must be non-empty");
  d.visual_len = d.train[0].visual.rows();
  d.visual_width = d.train[0].visual.cols();
  d.text_len = d.train[0].tokens.size();
  d.num_classes = cfg.model.num_classes;
  for (const auto* split : {&d.train, &d.val, &d.test}) {
    for (std::size_t i = 0; i < split->size(); ++i) {
      const Example& ex = (*split)[i];
      if (ex.tokens.size() != cfg.model.text_len) {
        throw Error("features: example " + std::to_string(i) + " has " +
                    std::to_string(ex.tokens.size()) + " tokens, model text_len is " +
                    std::to_string(cfg.model.text_len));
      }
      for (int t : ex.tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.model.vocab) {
          throw Error("features: example " + std::to_string(i) + " has token " +
                      std::to_string(t) + " outside the vocabulary");
        }
      }
      if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= cfg.model.num_classes) {
        throw Error("features: example " + std::to_string(i) + " has label " +
                    std::to_string(ex.label) + " outside [0, num_classes)");
      }
    }
  }
  return d;
}

Model make_model(const RunConfig& cfg, std::size_t visual_width, std::size_t generators) {
  const SeedPlan seeds = SeedPlan::from(cfg.seed);
  Model m = build_model(cfg.model, visual_width, generators, seeds.init);
  if (cfg.adapter.enabled) {
    Rng rng(Rng::mix(seeds.init ^ 0x61646170ULL));
    attach_adapters(m, cfg.adapter.hidden == 0 ? cfg.model.width / 8 : cfg.adapter.hidden, rng);
  }
  return m;
}

void run_gen_data(const RunConfig& cfg, const RunContext& ctx) {
  cfg.validate();
  if (cfg.features) throw Error("gen-data: config.features is set; nothing to generate");
  const TaskDataset d = load_dataset(cfg);
  fs::create_directories(cfg.out_dir);
  const std::pair<const char*, const std::vector<Example>*> splits[] = {
      {"train", &d.train}, {"val", &d.val}, {"test", &d.test}};
  for (const auto& [name, examples] : splits) {
    write_features(cfg.out_dir / (std::string(name) + ".dvpf"), *examples);
    write_labels_csv(cfg.out_dir / (std::string(name) + ".csv"), *examples);
    log(ctx, std::string("wrote ") + name + ": " + std::to_string(examples->size()) + " examples");
  }
  write_config(cfg);
}

TrainSummary run_train(const RunConfig& cfg, const RunContext& ctx) {
  cfg.validate();
  const TaskDataset data = load_dataset(cfg);
  Model model = make_model(cfg, data.visual_width, generators_for(cfg.prompt));
  fs::create_directories(cfg.out_dir);
  write_config(cfg);
  const ParamCount pc = count_params(model);
  log(ctx, "parameters: " + std::to_string(pc.total) + " total, " + std::to_string(pc.trainable) +
               " trainable");
  TrainSummary s = train_with(cfg, cfg.prompt, data, model, ctx, "");
  write_metrics(cfg.out_dir / "metrics.csv", s.history);
  if (s.test.count > 0) {
    auto out = open_out(cfg.out_dir / "test.csv");
    out << "# dvp test metrics v1\n";
    out << "test_loss,test_acc\n" << s.test.loss << ',' << s.test.accuracy << '\n';
  }
  save_checkpoint(cfg.out_dir / "model.dvpm", model);
  return s;
}

SweepSummary run_sweep(const RunConfig& cfg, const RunContext& ctx) {
  cfg.validate();
  const TaskDataset data = load_dataset(cfg);
  std::vector<std::size_t> layers = cfg.sweep.layers;
  if (layers.empty()) {
    for (std::size_t k = 1; k <= cfg.model.layers; ++k) layers.push_back(k);
  }
  fs::create_directories(cfg.out_dir);
  write_config(cfg);

  SweepSummary summary;
  summary.rows.resize(layers.size());
  std::vector<std::vector<EpochMetrics>> histories(layers.size());
  std::vector<std::string> errors(layers.size());
  const auto n = static_cast<std::ptrdiff_t>(layers.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      const PromptSpec prompt{Strategy::DvpSingle, layers[i], 0};
      Model model = make_model(cfg, data.visual_width, 1);
      RunContext quiet;
      TrainSummary s = train_with(cfg, prompt, data, model, quiet, "");
      histories[i] = s.history;
      SweepRow& row = summary.rows[i];
      row.layer = layers[i];
      row.final_val_acc = s.history.back().val_acc;
      for (const auto& m : s.history) row.best_val_acc = std::max(row.best_val_acc, m.val_acc);
      row.flops = estimate_flops(cfg.model, prompt, data.visual_len, data.visual_width).total;
#pragma omp critical(dvp_log)
      {
        std::ostringstream msg;
        msg << std::fixed << std::setprecision(4) << "layer " << layers[i] << " final_val_acc "
            << row.final_val_acc;
        log(ctx, msg.str());
      }
    } catch (const std::exception& e) {
      errors[i] = "sweep layer " + std::to_string(layers[i]) + ": " + e.what();
    }
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw Error(e);
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    write_metrics(cfg.out_dir / ("layer_" + std::to_string(layers[i])) / "metrics.csv",
                  histories[i]);
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < summary.rows.size(); ++i) {
    const auto& r = summary.rows[i];
    const auto& b = summary.rows[best];
    if (r.final_val_acc > b.final_val_acc ||
        (r.final_val_acc == b.final_val_acc && r.layer < b.layer)) {
      best = i;
    }
  }
  summary.argmax_layer = summary.rows[best].layer;
  auto out = open_out(cfg.out_dir / "sweep.csv");
  out << "# dvp sweep v1 argmax_layer=" << summary.argmax_layer << '\n';
  out << "layer,final_val_acc,best_val_acc,flops_estimate\n";
  for (const auto& r : summary.rows) {
    out << r.layer << ',' << r.final_val_acc << ',' << r.best_val_acc << ',' << r.flops << '\n';
  }
  log(ctx, "argmax layer " + std::to_string(summary.argmax_layer));
  return summary;
}

SearchSummary run_search_mode(const RunConfig& cfg, const RunContext& ctx) {
  cfg.validate();
  const TaskDataset data = load_dataset(cfg);
  const std::size_t M = cfg.model.layers;
  Model model = make_model(cfg, data.visual_width, M);
  fs::create_directories(cfg.out_dir);
  write_config(cfg);

  TrainConfig tc = cfg.train;
  tc.seed = SeedPlan::from(cfg.seed).train;
  SearchConfig sc;
  sc.arms = M;
  sc.samples = cfg.search.samples;
  sc.alpha = cfg.search.alpha;
  sc.steps = cfg.search.steps > 0 ? cfg.search.steps
                                  : cfg.search.epochs * tc.steps_per_epoch(data.train.size());
  sc.seed = SeedPlan::from(cfg.seed).search;
  LiveOracle oracle(model, data, tc, cfg.search.val_batch, Rng::mix(sc.seed ^ 1));
  log(ctx, "search: " + std::to_string(sc.steps) + " steps over " + std::to_string(M) + " arms");

  SearchSummary s;
  s.result = run_search(oracle, sc);
  {
    auto out = open_out(cfg.out_dir / "search_trace.csv");
    out.precision(6);
    s.result.trace.write_csv(out);
  }
  {
    auto out = open_out(cfg.out_dir / "search.csv");
    out << std::setprecision(17);
    out << "# dvp search summary v1\n";
    out << "arm,H,pi,is_best\n";
    const auto pi = s.result.final_state.policy();
    for (std::size_t k = 1; k <= M; ++k) {
      out << k << ',' << s.result.final_state.preferences[k - 1] << ',' << pi[k - 1] << ','
          << (k == s.result.best_arm ? 1 : 0) << '\n';
    }
  }
  log(ctx, "best arm " + std::to_string(s.result.best_arm));

  if (cfg.search.final_train) {
    RunConfig final_cfg = cfg;
    final_cfg.prompt = PromptSpec{Strategy::DvpSingle, s.result.best_arm, 0};
    Model fresh = make_model(final_cfg, data.visual_width, 1);
    s.final_train = train_with(final_cfg, final_cfg.prompt, data, fresh, ctx, "final ");
    write_metrics(cfg.out_dir / "final_metrics.csv", s.final_train->history);
    save_checkpoint(cfg.out_dir / "model.dvpm", fresh);
  }
  return s;
}

BanditTestSummary run_bandit_test(const RunConfig& cfg, const RunContext& ctx) {
  cfg.validate();
  const auto& b = cfg.bandit;
  BanditTestSummary s;
  s.expected_best =
      static_cast<std::size_t>(std::max_element(b.means.begin(), b.means.end()) - b.means.begin()) + 1;
  fs::create_directories(cfg.out_dir);
  write_config(cfg);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < b.seeds; ++i) {
    SearchConfig sc;
    sc.arms = b.means.size();
    sc.samples = b.samples;
    sc.steps = b.steps;
    sc.alpha = b.alpha;
    sc.seed = cfg.seed + i;
    SearchResult r;
    if (b.oracle == BanditOracleKind::Scripted) {
      ScriptedOracle oracle = ScriptedOracle::constant(b.means);
      r = run_search(oracle, sc);
    } else {
      BernoulliOracle oracle(b.means, Rng::mix(sc.seed ^ 0x6f7261636c65ULL));
      r = run_search(oracle, sc);
    }
    if (i == 0) {
      auto out = open_out(cfg.out_dir / "bandit_trace.csv");
      r.trace.write_csv(out);
    }
    s.best_arms.push_back(r.best_arm);
    s.final_policy_best.push_back(r.final_state.policy()[s.expected_best - 1]);
    hits += r.best_arm == s.expected_best;
  }
  s.recovery_rate = static_cast<double>(hits) / static_cast<double>(b.seeds);
  auto out = open_out(cfg.out_dir / "bandit_summary.csv");
  out << std::setprecision(17);
  out << "# dvp bandit-test summary v1 expected_best=" << s.expected_best
      << " recovery_rate=" << s.recovery_rate << '\n';
  out << "seed,best_arm,pi_expected_best\n";
  for (std::size_t i = 0; i < b.seeds; ++i) {
    out << cfg.seed + i << ',' << s.best_arms[i] << ',' << s.final_policy_best[i] << '\n';
  }
  std::ostringstream msg;
  msg << "recovery " << hits << "/" << b.seeds << " (rate " << s.recovery_rate << ")";
  log(ctx, msg.str());
  return s;
}

std::vector<FlopsRow> run_flops_report(const RunConfig& cfg, const RunContext& ctx) {
  cfg.model.validate();
  if (cfg.flops.visual_len < 1) throw Error("config.flops.visual_len: must be >= 1");
  const std::size_t N = cfg.flops.visual_len;
  const std::size_t dv = cfg.flops.visual_width;
  std::vector<FlopsRow> rows;
  for (Strategy s : {Strategy::Common, Strategy::Cls, Strategy::DvpSingle, Strategy::DvpMulti}) {
    const std::size_t last = is_dvp(s) ? cfg.model.layers : 1;
    for (std::size_t k = 1; k <= last; ++k) {
      PromptSpec p{s, k, 0};
      rows.push_back(FlopsRow{s, k, token_count(cfg.model.kind, cfg.model.text_len, N, s),
                              estimate_flops(cfg.model, p, N, dv)});
    }
  }
  fs::create_directories(cfg.out_dir);
  {
    auto out = open_out(cfg.out_dir / "flops.csv");
    out << std::setprecision(6);
    out << "# dvp flops v1 kind=" << to_string(cfg.model.kind) << " d=" << cfg.model.width
        << " M=" << cfg.model.layers << " L=" << cfg.model.text_len << " N=" << N << '\n';
    out << "strategy,layer,tokens,encoder_lengths,decoder_lengths,total_macs,ratio_vs_common\n";
    for (const auto& r : rows) {
      out << to_string(r.strategy) << ',' << r.layer << ',' << r.tokens << ','
          << join(r.report.encoder_lengths) << ',' << join(r.report.decoder_lengths) << ','
          << r.report.total << ',' << r.report.ratio << '\n';
    }
  }
  std::ostringstream txt;
  txt << "model " << to_string(cfg.model.kind) << "  d=" << cfg.model.width
      << "  M=" << cfg.model.layers << "  L=" << cfg.model.text_len << "  N=" << N << "\n\n";
  txt << std::left << std::setw(12) << "strategy" << std::right << std::setw(6) << "layer"
      << std::setw(8) << "tokens" << std::setw(12) << "GMACs" << std::setw(10) << "ratio"
      << "\n";
  for (const auto& r : rows) {
    txt << std::left << std::setw(12) << to_string(r.strategy) << std::right << std::setw(6)
        << r.layer << std::setw(8) << r.tokens << std::setw(12) << std::fixed
        << std::setprecision(3) << static_cast<double>(r.report.total) / 1e9 << std::setw(10)
        << std::setprecision(4) << r.report.ratio << "\n";
  }
  {
    auto out = open_out(cfg.out_dir / "flops.txt");
    out << txt.str();
  }
  log(ctx, txt.str());
  return rows;
}

std::string ascii_heatmap(const Tensor& m) {
  static const char kRamp[] = " .:-=+*#%@";
  std::string s;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      const double v = std::clamp(m(r, c), 0.0, 1.0);
      s += kRamp[static_cast<std::size_t>(v * 9.0 + 0.5)];
    }
    s += '\n';
  }
  return s;
}

void run_dump_attn(const RunConfig& cfg, const RunContext& ctx) {
  cfg.validate();
  const TaskDataset data = load_dataset(cfg);
  Model model = cfg.dump_attn.checkpoint.empty()
                    ? make_model(cfg, data.visual_width, generators_for(cfg.prompt))
                    : load_checkpoint(cfg.dump_attn.checkpoint);
  if (cfg.dump_attn.checkpoint.empty()) {
    train_with(cfg, cfg.prompt, data, model, ctx, "");
  }
  if (cfg.dump_attn.example >= data.val.size()) {
    throw Error("config.dump_attn.example: index " + std::to_string(cfg.dump_attn.example) +
                " outside the val split (" + std::to_string(data.val.size()) + " examples)");
  }
  const std::size_t idx = cfg.dump_attn.example;
  Batch b = make_batch(data.val, std::span<const std::size_t>(&idx, 1));
  Tape tape;
  tape.set_grad_enabled(false);
  ForwardResult fr = forward_with_prompt(tape, model, cfg.prompt, b, true);

  const fs::path dir = cfg.out_dir / "attn";
  std::ostringstream heat;
  auto dump = [&](const AttentionTrace& trace, const std::string& stack) {
    for (std::size_t i = 0; i < trace.layers.size(); ++i) {
      const Tensor& m = trace.layers[i];
      std::ostringstream name;
      name << (stack == "encoder" ? "" : stack + "_") << "layer_" << std::setw(2) << std::setfill('0') << i + 1 << ".csv";
      auto out = open_out(dir / name.str());
      out << "# dvp attention v1 " << stack << " layer " << i + 1 << " rows=query cols=key\n";
      for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) out << (c ? "," : "") << m(r, c);
        out << '\n';
      }
      heat << stack << " layer " << i + 1 << " (" << m.rows() << "x" << m.cols() << ")\n"
           << ascii_heatmap(m) << '\n';
    }
  };
  if (fr.encoder_attention) dump(*fr.encoder_attention, "encoder");
  if (fr.decoder_attention) dump(*fr.decoder_attention, "decoder");
  if (fr.prompt_attention) {
    auto out = open_out(dir / "prompt.csv");
    out << "# dvp attention v1 prompt rows=query cols=visual\n";
    const Tensor& m = *fr.prompt_attention;
    for (std::size_t r = 0; r < m.rows(); ++r) {
      for (std::size_t c = 0; c < m.cols(); ++c) out << (c ? "," : "") << m(r, c);
      out << '\n';
    }
    heat << "prompt (" << m.rows() << "x" << m.cols() << ")\n" << ascii_heatmap(m) << '\n';
  }
  auto out = open_out(dir / "heatmap.txt");
  out << heat.str();
  log(ctx, "wrote attention maps to " + dir.string());
}

}  // namespace dvp
