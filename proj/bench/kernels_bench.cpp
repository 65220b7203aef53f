// SPDX-License-Identifier: Apache-2.0
// OpenMP kernels against the serial reference, plus one full training step.
#include <benchmark/benchmark.h>

#include <vector>

#include "dvp/kernels.hpp"
#include "dvp/rng.hpp"
#include "dvp/tasks.hpp"
#include "dvp/training.hpp"

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  dvp::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

template <auto Fn>
void bm_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    Fn(a, b, c, n, n, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}

template <auto Fn>
void bm_attention(benchmark::State& state) {
  dvp::AttentionDims dims{32, static_cast<std::size_t>(state.range(0)),
                          static_cast<std::size_t>(state.range(0)), 64, 4, 0.25};
  const std::size_t rows = dims.batch * dims.q_len;
  const auto q = random_vec(rows * 64, 1), k = random_vec(rows * 64, 2), v = random_vec(rows * 64, 3);
  std::vector<double> out(rows * 64), probs(dims.probs_size());
  for (auto _ : state) {
    Fn(q, k, v, out, probs, dims);
    benchmark::DoNotOptimize(out.data());
  }
}

template <auto Fn>
void bm_layer_norm(benchmark::State& state) {
  const std::size_t m = 32 * 9, d = 64;
  const auto x = random_vec(m * d, 1);
  std::vector<double> gain(d, 1.0), bias(d, 0.0), y(m * d), mean(m), rstd(m);
  for (auto _ : state) {
    Fn(x, gain, bias, y, mean, rstd, m, d, 1e-5);
    benchmark::DoNotOptimize(y.data());
  }
}

void bm_train_step(benchmark::State& state) {
  dvp::SyntheticTaskSpec task;
  task.train_size = 32;
  task.val_size = 1;
  task.test_size = 0;
  const dvp::TaskDataset data = dvp::gen_synthetic(task);
  dvp::ModelSpec spec;
  dvp::Model model = dvp::build_model(spec, task.visual_width, 1, 1);
  dvp::OptimizerConfig oc;
  oc.kind = dvp::OptimizerKind::AdamW;
  oc.lr = 1e-4;
  dvp::Optimizer opt(oc);
  const dvp::Batch batch = dvp::make_batch(data.train, 0, 32);
  const dvp::PromptSpec prompt{dvp::Strategy::DvpSingle, static_cast<std::size_t>(state.range(0)), 0};
  for (auto _ : state) {
    benchmark::DoNotOptimize(dvp::train_step(model, prompt, batch, opt, dvp::LossKind::SoftmaxCrossEntropy));
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 32));
}

}  // namespace

BENCHMARK(bm_matmul<dvp::kernels::matmul>)->Name("matmul/openmp")->Arg(64)->Arg(256);
BENCHMARK(bm_matmul<dvp::reference::matmul>)->Name("matmul/reference")->Arg(64)->Arg(256);
BENCHMARK(bm_attention<dvp::kernels::attention>)->Name("attention/openmp")->Arg(9)->Arg(40);
BENCHMARK(bm_attention<dvp::reference::attention>)->Name("attention/reference")->Arg(9)->Arg(40);
BENCHMARK(bm_layer_norm<dvp::kernels::layer_norm>)->Name("layer_norm/openmp");
BENCHMARK(bm_layer_norm<dvp::reference::layer_norm>)->Name("layer_norm/reference");
BENCHMARK(bm_train_step)->Name("train_step/dvp-single")->Arg(1)->Arg(6)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
