// SPDX-License-Identifier: Apache-2.0
#include "dvp/bandit.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "dvp/tensor.hpp"

namespace dvp {

std::vector<double> policy_from_preferences(std::span<const double> preferences) {
  if (preferences.empty()) throw Error("policy: no arms");
  for (double h : preferences) {
    if (!std::isfinite(h)) throw Error("policy: preferences must be finite");
  }
  const double mx = *std::max_element(preferences.begin(), preferences.end());
  std::vector<double> pi(preferences.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < pi.size(); ++i) {
    pi[i] = std::exp(preferences[i] - mx);
    sum += pi[i];
  }
  for (auto& p : pi) p /= sum;
  return pi;
}

PolicyState PolicyState::uniform(std::size_t arms, double alpha) {
  if (arms < 1) throw Error("policy: need at least one arm");
  return PolicyState{std::vector<double>(arms, 0.0), alpha, 0};
}

std::size_t PolicyState::best_arm() const {
  return static_cast<std::size_t>(
             std::max_element(preferences.begin(), preferences.end()) - preferences.begin()) +
         1;
}

void update_preference(PolicyState& state, std::size_t arm, double reward, double baseline,
                       std::span<const double> policy) {
  if (arm < 1 || arm > state.arms()) {
    throw Error("update_preference: arm " + std::to_string(arm) + " outside [1, " +
                std::to_string(state.arms()) + "]");
  }
  if (!(reward >= 0.0 && reward <= 1.0) || !(baseline >= 0.0 && baseline <= 1.0)) {
    throw Error("update_preference: reward and baseline must lie in [0, 1]");
  }
  std::vector<double> fresh;
  if (policy.empty()) {
    fresh = state.policy();
    policy = fresh;
  }
  const double p = policy[arm - 1];
  state.preferences[arm - 1] += state.alpha * (reward - baseline) * p * (1.0 - p);
}

std::size_t sample_training_arm(const PolicyState& state, Rng& rng) {
  return static_cast<std::size_t>(rng.below(state.arms())) + 1;
}

std::vector<std::size_t> sample_validation_arms(const PolicyState& state, std::size_t n,
                                                Rng& rng) {
  const std::size_t M = state.arms();
  if (n < 1 || n > M) {
    throw Error("sample_validation_arms: cannot draw " + std::to_string(n) +
                " distinct arms from " + std::to_string(M));
  }
  std::vector<double> weights = state.policy();
  std::vector<std::size_t> picked;
  picked.reserve(n);
  for (std::size_t draw = 0; draw < n; ++draw) {
    double total = 0.0;
    for (double w : weights) total += w;
    const double u = rng.uniform() * total;
    double acc = 0.0;
    std::size_t choice = M;
    for (std::size_t i = 0; i < M; ++i) {
      if (weights[i] <= 0.0) continue;
      acc += weights[i];
      choice = i;
      if (u < acc) break;
    }
    picked.push_back(choice + 1);
    weights[choice] = 0.0;
  }
  return picked;
}

double compute_baseline(std::span<const double> rewards) {
  if (rewards.empty()) throw Error("compute_baseline: no rewards");
  double sum = 0.0;
  for (double r : rewards) sum += r;
  return sum / static_cast<double>(rewards.size());
}

std::vector<double> RewardOracle::rewards(std::span<const std::size_t> arms, std::size_t step) {
  std::vector<double> out;
  out.reserve(arms.size());
  for (std::size_t arm : arms) out.push_back(reward(arm, step));
  return out;
}

ScriptedOracle::ScriptedOracle(std::vector<std::vector<double>> table) : table_(std::move(table)) {
  if (table_.empty()) throw Error("scripted oracle: empty reward table");
}

double ScriptedOracle::reward(std::size_t arm, std::size_t step) {
  const auto& row = table_[step % table_.size()];
  if (arm < 1 || arm > row.size()) {
    throw Error("scripted oracle: no reward for arm " + std::to_string(arm));
  }
  return row[arm - 1];
}

BernoulliOracle::BernoulliOracle(std::vector<double> means, std::uint64_t seed)
    : means_(std::move(means)), rng_(seed) {
  for (double m : means_) {
    if (!(m >= 0.0 && m <= 1.0)) throw Error("bernoulli oracle: means must lie in [0, 1]");
  }
}

double BernoulliOracle::reward(std::size_t arm, std::size_t /*step*/) {
  if (arm < 1 || arm > means_.size()) {
    throw Error("bernoulli oracle: no mean for arm " + std::to_string(arm));
  }
  return rng_.uniform() < means_[arm - 1] ? 1.0 : 0.0;
}

void SearchConfig::validate() const {
  if (arms < 1) throw Error("search: arms must be >= 1");
  if (samples < 1 || samples > arms) {
    throw Error("search: samples per step must be in [1, " + std::to_string(arms) + "], got " +
                std::to_string(samples));
  }
  if (!std::isfinite(alpha) || alpha < 0.0) throw Error("search: alpha must be finite and >= 0");
}

SearchResult run_search(RewardOracle& oracle, const SearchConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  PolicyState state = PolicyState::uniform(cfg.arms, cfg.alpha);
  SearchTrace trace;
  trace.arms = cfg.arms;
  trace.steps.reserve(cfg.steps);

  for (std::size_t t = 0; t < cfg.steps; ++t) {
    SearchStep rec;
    rec.step = t;
    try {
      rec.trained_arm = sample_training_arm(state, rng);
      oracle.train(rec.trained_arm, t);
      rec.sampled_arms = sample_validation_arms(state, cfg.samples, rng);
      oracle.begin_validation(t);
      rec.rewards = oracle.rewards(rec.sampled_arms, t);
    } catch (const std::exception& e) {
      throw Error("search aborted at step " + std::to_string(t) + ": " + e.what());
    }
    if (rec.rewards.size() != rec.sampled_arms.size()) {
      throw Error("search aborted at step " + std::to_string(t) + ": oracle returned " +
                  std::to_string(rec.rewards.size()) + " rewards for " +
                  std::to_string(rec.sampled_arms.size()) + " arms");
    }
    for (double r : rec.rewards) {
      if (!(r >= 0.0 && r <= 1.0)) {
        throw Error("search aborted at step " + std::to_string(t) + ": reward " +
                    std::to_string(r) + " outside [0, 1]");
      }
    }
    rec.baseline = compute_baseline(rec.rewards);
    const std::vector<double> pi = state.policy();
    for (std::size_t i = 0; i < rec.sampled_arms.size(); ++i) {
      update_preference(state, rec.sampled_arms[i], rec.rewards[i], rec.baseline, pi);
    }
    ++state.step;
    rec.preferences = state.preferences;
    rec.policy = state.policy();
    trace.steps.push_back(std::move(rec));
  }
  SearchResult result;
  result.best_arm = state.best_arm();
  result.final_state = std::move(state);
  result.trace = std::move(trace);
  return result;
}

void SearchTrace::write_csv(std::ostream& out) const {
  out << "# dvp search trace v1\n";
  out << "step,trained_arm,sampled_arms,rewards,baseline";
  for (std::size_t i = 1; i <= arms; ++i) out << ",H_" << i;
  for (std::size_t i = 1; i <= arms; ++i) out << ",pi_" << i;
  out << '\n';
  const auto old_flags = out.flags();
  const auto old_precision = out.precision();
  out << std::setprecision(17);
  for (const auto& s : steps) {
    out << s.step << ',' << s.trained_arm << ',';
    for (std::size_t i = 0; i < s.sampled_arms.size(); ++i) {
      out << (i ? ";" : "") << s.sampled_arms[i];
    }
    out << ',';
    for (std::size_t i = 0; i < s.rewards.size(); ++i) out << (i ? ";" : "") << s.rewards[i];
    out << ',' << s.baseline;
    for (double h : s.preferences) out << ',' << h;
    for (double p : s.policy) out << ',' << p;
    out << '\n';
  }
  out.flags(old_flags);
  out.precision(old_precision);
}

}  // namespace dvp
