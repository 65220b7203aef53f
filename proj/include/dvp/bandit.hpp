// SPDX-License-Identifier: Apache-2.0
#pragma once

// Gradient-bandit search over prompt insertion layers.
//
// Arms are insertion layers numbered 1..M. The policy is the softmax of a
// preference vector H. Each step trains the backbone with one uniformly
// drawn arm, scores n distinct arms drawn from the policy on a validation
// batch, and moves the preference of every scored arm by
//
//   H(K) += alpha * (R_K - R_b) * pi(K) * (1 - pi(K))
//
// where R_b is the mean reward of the n scored arms and pi is the policy
// at the start of the step. Unscored arms are left untouched.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "dvp/rng.hpp"

namespace dvp {

/// Stabilized softmax. Throws on non-finite input.
std::vector<double> policy_from_preferences(std::span<const double> preferences);

struct PolicyState {
  std::vector<double> preferences;
  double alpha = 5e-3;
  std::size_t step = 0;

  static PolicyState uniform(std::size_t arms, double alpha);
  std::size_t arms() const { return preferences.size(); }
  std::vector<double> policy() const { return policy_from_preferences(preferences); }
  /// 1-based arm with the largest preference; ties go to the lowest index.
  std::size_t best_arm() const;
};

/// Applies the preference update to `arm` (1-based) only. `policy` is the
/// distribution to use for pi(K); when empty it is recomputed from the
/// current preferences. Rewards must lie in [0, 1].
void update_preference(PolicyState& state, std::size_t arm, double reward, double baseline,
                       std::span<const double> policy = {});

/// Uniform over 1..M.
std::size_t sample_training_arm(const PolicyState& state, Rng& rng);

/// n distinct arms, drawn one at a time proportionally to the policy and
/// renormalized after each draw.
std::vector<std::size_t> sample_validation_arms(const PolicyState& state, std::size_t n, Rng& rng);

/// Arithmetic mean. Throws on an empty list.
double compute_baseline(std::span<const double> rewards);

/// Supplies rewards for arms. Rewards must lie in [0, 1].
class RewardOracle {
 public:
  virtual ~RewardOracle() = default;
  /// One supervised step with the given arm active. Default: no-op.
  virtual void train(std::size_t /*arm*/, std::size_t /*step*/) {}
  /// Called before the rewards of a step are requested.
  virtual void begin_validation(std::size_t /*step*/) {}
  virtual double reward(std::size_t arm, std::size_t step) = 0;
  /// Rewards for all sampled arms of a step. The default calls reward() in
  /// order; implementations may evaluate arms concurrently.
  virtual std::vector<double> rewards(std::span<const std::size_t> arms, std::size_t step);
};

/// Replays a fixed table: row `step % rows` holds one reward per arm. A
/// single row gives constant rewards.
class ScriptedOracle : public RewardOracle {
 public:
  explicit ScriptedOracle(std::vector<std::vector<double>> table);
  static ScriptedOracle constant(std::vector<double> rewards) {
    return ScriptedOracle({std::move(rewards)});
  }
  double reward(std::size_t arm, std::size_t step) override;

 private:
  std::vector<std::vector<double>> table_;
};

/// Each query of arm K returns 1 with probability means[K-1], else 0.
class BernoulliOracle : public RewardOracle {
 public:
  BernoulliOracle(std::vector<double> means, std::uint64_t seed);
  double reward(std::size_t arm, std::size_t step) override;

 private:
  std::vector<double> means_;
  Rng rng_;
};

struct SearchConfig {
  std::size_t arms = 6;     // M
  std::size_t samples = 5;  // n, validation arms per step
  std::size_t steps = 2000; // T
  double alpha = 5e-3;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SearchStep {
  std::size_t step = 0;
  std::size_t trained_arm = 0;
  std::vector<std::size_t> sampled_arms;
  std::vector<double> rewards;
  double baseline = 0.0;
  std::vector<double> preferences;  // after the step's updates
  std::vector<double> policy;       // after the step's updates
};

struct SearchTrace {
  std::size_t arms = 0;
  std::vector<SearchStep> steps;

  /// Header comment line, column header, then one row per step:
  /// step,trained_arm,sampled_arms,rewards,baseline,H_1..H_M,pi_1..pi_M
  /// with sampled_arms and rewards joined by ';'.
  void write_csv(std::ostream& out) const;
};

struct SearchResult {
  std::size_t best_arm = 0;
  PolicyState final_state;
  SearchTrace trace;
};

/// Runs the full search loop. Oracle failures and out-of-range rewards
/// abort with a dvp::Error naming the step.
SearchResult run_search(RewardOracle& oracle, const SearchConfig& cfg);

}  // namespace dvp
