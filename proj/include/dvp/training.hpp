// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dvp/bandit.hpp"
#include "dvp/tasks.hpp"

namespace dvp {

enum class OptimizerKind { Sgd, AdamW };
std::string to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& s);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Sgd;
  double lr = 0.05;
  double momentum = 0.9;  // sgd
  double beta1 = 0.9;     // adamw
  double beta2 = 0.999;   // adamw
  double eps = 1e-8;      // adamw
  double weight_decay = 0.01;
  std::size_t warmup_steps = 0;

  void validate() const;
};

/// SGD with momentum or AdamW, both with decoupled weight decay, and a
/// linear warmup from lr/warmup_steps to lr. Only parameters that carry a
/// gradient are touched, so a tensor that took no part in a step keeps its
/// value and its optimizer state.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg);

  /// Applies one update from Tensor::grad and clears the gradients.
  void step(Model& model);
  double current_lr() const;
  std::size_t steps() const { return step_; }

 private:
  struct State {
    std::vector<double> m;
    std::vector<double> v;
    std::size_t updates = 0;
  };
  OptimizerConfig cfg_;
  std::size_t step_ = 0;
  std::map<std::string, State> state_;
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double warmup_epochs = 1.0;  // linear ramp length, in epochs
  std::size_t eval_batch = 128;
  LossKind loss = LossKind::SoftmaxCrossEntropy;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t steps_per_epoch(std::size_t train_size) const;
  std::size_t warmup_steps(std::size_t train_size) const;
};

struct StepResult {
  double loss = 0.0;
  std::size_t correct = 0;
  std::size_t count = 0;
};

/// Forward, backward and one optimizer update on a single batch.
StepResult train_step(Model& model, const PromptSpec& spec, const Batch& batch,
                      Optimizer& optimizer, LossKind loss);

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Full training run with shuffled mini-batches. Deterministic in
/// (model, data, cfg).
std::vector<EpochMetrics> train_model(Model& model, const PromptSpec& spec,
                                      const TaskDataset& data, const TrainConfig& cfg,
                                      const EpochCallback& on_epoch = {});

/// Live reward oracle for the placement search. Each train() call takes
/// the next mini-batch of an endless shuffled pass over the training split
/// and updates the shared backbone, the head and the generator of the
/// trained arm. Each step's rewards are accuracies of every sampled arm on
/// one freshly drawn validation batch.
class LiveOracle : public RewardOracle {
 public:
  LiveOracle(Model& model, const TaskDataset& data, const TrainConfig& train,
             std::size_t val_batch, std::uint64_t seed);

  void train(std::size_t arm, std::size_t step) override;
  void begin_validation(std::size_t step) override;
  double reward(std::size_t arm, std::size_t step) override;
  std::vector<double> rewards(std::span<const std::size_t> arms, std::size_t step) override;

  double last_train_loss() const { return last_loss_; }

 private:
  Model& model_;
  const TaskDataset& data_;
  TrainConfig train_;
  std::size_t val_batch_;
  Optimizer optimizer_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  Batch val_;
  double last_loss_ = 0.0;
};

/// PromptSpec used for arm K during search: dvp-single at layer K with
/// generator K-1.
PromptSpec arm_prompt(std::size_t arm);

}  // namespace dvp
