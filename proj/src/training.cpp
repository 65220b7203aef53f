// SPDX-License-Identifier: Apache-2.0
#include "dvp/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dvp {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adamw"; }

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adamw") return OptimizerKind::AdamW;
  throw Error("unknown optimizer '" + s + "' (expected sgd | adamw)");
}

void OptimizerConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw Error("optimizer: lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error("optimizer: momentum must be in [0, 1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw Error("optimizer: betas must be in [0, 1)");
  }
  if (!(eps > 0.0)) throw Error("optimizer: eps must be positive");
  if (!(weight_decay >= 0.0)) throw Error("optimizer: weight_decay must be >= 0");
}

Optimizer::Optimizer(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

double Optimizer::current_lr() const {
  if (cfg_.warmup_steps == 0 || step_ >= cfg_.warmup_steps) return cfg_.lr;
  return cfg_.lr * static_cast<double>(step_ + 1) / static_cast<double>(cfg_.warmup_steps);
}

void Optimizer::step(Model& model) {
  const double lr = current_lr();
  model.visit([&](const std::string& name, Tensor& p) {
    if (!p.requires_grad() || !p.has_grad()) return;
    auto g = p.grad();
    auto w = p.values();
    State& s = state_[name];
    if (s.m.empty()) s.m.assign(w.size(), 0.0);
    ++s.updates;
    const double decay = 1.0 - lr * cfg_.weight_decay;
    if (cfg_.kind == OptimizerKind::Sgd) {
      for (std::size_t i = 0; i < w.size(); ++i) {
        s.m[i] = cfg_.momentum * s.m[i] + g[i];
        w[i] = w[i] * decay - lr * s.m[i];
      }
    } else {
      if (s.v.empty()) s.v.assign(w.size(), 0.0);
      const double t = static_cast<double>(s.updates);
      const double c1 = 1.0 - std::pow(cfg_.beta1, t);
      const double c2 = 1.0 - std::pow(cfg_.beta2, t);
      for (std::size_t i = 0; i < w.size(); ++i) {
        s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
        s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = s.m[i] / c1;
        const double vhat = s.v[i] / c2;
        w[i] = w[i] * decay - lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
    p.clear_grad();
  });
  ++step_;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw Error("train: batch_size must be >= 1");
  if (eval_batch < 1) throw Error("train: eval_batch must be >= 1");
  if (!(warmup_epochs >= 0.0 && warmup_epochs <= 1e6)) {
    throw Error("train: warmup_epochs must be in [0, 1e6]");
  }
  optimizer.validate();
}

std::size_t TrainConfig::steps_per_epoch(std::size_t train_size) const {
  return (train_size + batch_size - 1) / batch_size;
}

std::size_t TrainConfig::warmup_steps(std::size_t train_size) const {
  return static_cast<std::size_t>(
      std::llround(warmup_epochs * static_cast<double>(steps_per_epoch(train_size))));
}

namespace {

Var loss_of(Var logits, std::span<const int> labels, LossKind kind) {
  return kind == LossKind::SoftmaxCrossEntropy ? ad::cross_entropy(logits, labels)
                                               : ad::binary_cross_entropy(logits, labels);
}

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const auto pred = argmax_rows(logits);
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) n += pred[i] == labels[i];
  return n;
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

}  // namespace

StepResult train_step(Model& model, const PromptSpec& spec, const Batch& batch,
                      Optimizer& optimizer, LossKind loss) {
  Tape tape;
  Var logits = forward_with_prompt(tape, model, spec, batch).logits;
  Var l = loss_of(logits, batch.labels, loss);
  StepResult r;
  r.loss = l.value()[0];
  if (!std::isfinite(r.loss)) throw Error("training diverged: non-finite loss");
  r.correct = count_correct(logits.value(), batch.labels);
  r.count = batch.size;
  tape.backward(l);
  tape.accumulate_param_grads();
  optimizer.step(model);
  return r;
}

std::vector<EpochMetrics> train_model(Model& model, const PromptSpec& spec,
                                      const TaskDataset& data, const TrainConfig& cfg,
                                      const EpochCallback& on_epoch) {
  cfg.validate();
  spec.validate(model);
  if (data.train.empty() || data.val.empty()) throw Error("train: empty train or val split");
  OptimizerConfig oc = cfg.optimizer;
  oc.warmup_steps = cfg.warmup_steps(data.train.size());
  Optimizer opt(oc);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<EpochMetrics> history;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle(order, rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - begin);
      Batch b = make_batch(data.train, std::span(order).subspan(begin, count));
      StepResult r = train_step(model, spec, b, opt, cfg.loss);
      loss_sum += r.loss * static_cast<double>(count);
      correct += r.correct;
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(order.size());
    m.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
    EvalResult val = evaluate(model, spec, data.val, cfg.eval_batch, cfg.loss);
    m.val_loss = val.loss;
    m.val_acc = val.accuracy;
    history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return history;
}

PromptSpec arm_prompt(std::size_t arm) {
  if (arm < 1) throw Error("arm_prompt: arms are 1-based");
  return PromptSpec{Strategy::DvpSingle, arm, arm - 1};
}

LiveOracle::LiveOracle(Model& model, const TaskDataset& data, const TrainConfig& train,
                       std::size_t val_batch, std::uint64_t seed)
    : model_(model),
      data_(data),
      train_(train),
      val_batch_(val_batch),
      optimizer_([&] {
        train.validate();
        OptimizerConfig oc = train.optimizer;
        oc.warmup_steps = train.warmup_steps(data.train.size());
        return oc;
      }()),
      rng_(seed) {
  if (data.train.empty() || data.val.empty()) throw Error("live oracle: empty train or val split");
  if (val_batch < 1 || val_batch > data.val.size()) {
    throw Error("live oracle: val_batch must be in [1, " + std::to_string(data.val.size()) + "]");
  }
  if (model.generators.empty()) throw Error("live oracle: model has no generators");
  order_.resize(data.train.size());
  std::iota(order_.begin(), order_.end(), 0);
  shuffle(order_, rng_);
}

void LiveOracle::train(std::size_t arm, std::size_t /*step*/) {
  if (arm < 1 || arm > model_.generators.size() || arm > model_.spec.layers) {
    throw Error("live oracle: arm " + std::to_string(arm) + " has no generator");
  }
  if (cursor_ >= order_.size()) {
    shuffle(order_, rng_);
    cursor_ = 0;
  }
  const std::size_t count = std::min(train_.batch_size, order_.size() - cursor_);
  Batch b = make_batch(data_.train, std::span(order_).subspan(cursor_, count));
  cursor_ += count;
  last_loss_ = train_step(model_, arm_prompt(arm), b, optimizer_, train_.loss).loss;
}

void LiveOracle::begin_validation(std::size_t /*step*/) {
  const std::size_t n = data_.val.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < val_batch_; ++i) std::swap(idx[i], idx[i + rng_.below(n - i)]);
  idx.resize(val_batch_);
  val_ = make_batch(data_.val, idx);
}

double LiveOracle::reward(std::size_t arm, std::size_t /*step*/) {
  if (val_.size == 0) throw Error("live oracle: reward requested before begin_validation");
  Tape tape;
  tape.set_grad_enabled(false);
  Var logits = forward_with_prompt(tape, model_, arm_prompt(arm), val_).logits;
  return static_cast<double>(count_correct(logits.value(), val_.labels)) /
         static_cast<double>(val_.size);
}

std::vector<double> LiveOracle::rewards(std::span<const std::size_t> arms, std::size_t step) {
  std::vector<double> out(arms.size(), 0.0);
  std::vector<std::string> errors(arms.size());
  const auto n = static_cast<std::ptrdiff_t>(arms.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      out[i] = reward(arms[i], step);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw Error(e);
  }
  return out;
}

}  // namespace dvp
