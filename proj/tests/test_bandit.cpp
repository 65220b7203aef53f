// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "dvp/bandit.hpp"
#include "dvp/tensor.hpp"

using namespace dvp;

namespace {

/// Counts the lines of a string.
std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

class ThrowingOracle : public RewardOracle {
 public:
  double reward(std::size_t, std::size_t step) override {
    if (step == 3) throw Error("boom");
    return 0.5;
  }
};

}  // namespace

TEST_CASE("policy is a stable softmax") {
  const std::vector<double> h{0.0, std::log(2.0), std::log(5.0)};
  const auto pi = policy_from_preferences(h);
  CHECK(std::abs(pi[0] - 1.0 / 8) < 1e-15);
  CHECK(std::abs(pi[1] - 2.0 / 8) < 1e-15);
  CHECK(std::abs(pi[2] - 5.0 / 8) < 1e-15);

  const std::vector<double> shifted{1000.0, 1000.0 + std::log(2.0), 1000.0 + std::log(5.0)};
  const auto pi2 = policy_from_preferences(shifted);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(pi[i] - pi2[i]) < 1e-12);

  const auto extreme = policy_from_preferences(std::vector<double>{-800.0, 800.0});
  CHECK(extreme[1] == 1.0);
  CHECK(extreme[0] >= 0.0);
  CHECK_THROWS_AS(policy_from_preferences(std::vector<double>{0.0, std::nan("")}), Error);
  CHECK_THROWS_AS(policy_from_preferences(std::vector<double>{}), Error);
}

TEST_CASE("preference update matches the hand-computed value") {
  PolicyState s = PolicyState::uniform(6, 1.0);
  update_preference(s, 3, 1.0, 0.5);
  CHECK(std::abs(s.preferences[2] - 0.5 * (1.0 / 6) * (5.0 / 6)) < 1e-15);
  for (std::size_t i : {0u, 1u, 3u, 4u, 5u}) CHECK(s.preferences[i] == 0.0);
  CHECK(s.best_arm() == 3);

  PolicyState z = PolicyState::uniform(4, 0.0);
  update_preference(z, 1, 1.0, 0.0);
  CHECK(z.preferences[0] == 0.0);

  CHECK_THROWS_AS(update_preference(s, 0, 0.5, 0.5), Error);
  CHECK_THROWS_AS(update_preference(s, 7, 0.5, 0.5), Error);
  CHECK_THROWS_AS(update_preference(s, 1, 1.5, 0.5), Error);
  CHECK_THROWS_AS(update_preference(s, 1, 0.5, -0.1), Error);
}

TEST_CASE("best_arm breaks ties towards the lowest index") {
  PolicyState s = PolicyState::uniform(5, 1.0);
  CHECK(s.best_arm() == 1);
  s.preferences = {0.0, 1.0, 0.0, 1.0, 0.0};
  CHECK(s.best_arm() == 2);
}

TEST_CASE("validation arms are distinct and follow the policy on the first draw") {
  Rng rng(3);
  PolicyState s = PolicyState::uniform(6, 1.0);
  s.preferences = {0.0, 0.0, std::log(4.0), 0.0, 0.0, 0.0};
  std::vector<double> first(6, 0.0);
  const int trials = 20000;
  for (int t = 0; t < trials; ++t) {
    const auto arms = sample_validation_arms(s, 5, rng);
    CHECK(arms.size() == 5);
    CHECK(std::set<std::size_t>(arms.begin(), arms.end()).size() == 5);
    for (auto a : arms) CHECK((a >= 1 && a <= 6));
    first[arms[0] - 1] += 1.0;
  }
  const auto pi = s.policy();
  for (int i = 0; i < 6; ++i) {
    const double sd = std::sqrt(pi[i] * (1 - pi[i]) / trials);
    CHECK(std::abs(first[i] / trials - pi[i]) < 5 * sd);
  }
  const auto all = sample_validation_arms(s, 6, rng);
  CHECK(std::set<std::size_t>(all.begin(), all.end()).size() == 6);
  CHECK_THROWS_AS(sample_validation_arms(s, 7, rng), Error);
  CHECK_THROWS_AS(sample_validation_arms(s, 0, rng), Error);
}

TEST_CASE("training arm draws are uniform") {
  Rng rng(4);
  PolicyState s = PolicyState::uniform(6, 1.0);
  s.preferences = {5.0, 0.0, 0.0, 0.0, 0.0, 0.0};
  std::vector<double> counts(6, 0.0);
  const int trials = 60000;
  for (int t = 0; t < trials; ++t) counts[sample_training_arm(s, rng) - 1] += 1.0;
  double chi2 = 0.0;
  const double expect = trials / 6.0;
  for (double c : counts) chi2 += (c - expect) * (c - expect) / expect;
  // 99.9th percentile of chi-square with 5 degrees of freedom.
  CHECK(chi2 < 20.52);
}

TEST_CASE("baseline is the mean and centred advantages cancel") {
  CHECK(compute_baseline(std::vector<double>{0.2, 0.4, 0.9}) == doctest::Approx(0.5));
  CHECK_THROWS_AS(compute_baseline(std::vector<double>{}), Error);
  Rng rng(5);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> r(5);
    for (auto& v : r) v = rng.uniform();
    const double b = compute_baseline(r);
    double sum = 0.0;
    for (double v : r) sum += v - b;
    CHECK(std::abs(sum) <= 8 * std::numeric_limits<double>::epsilon());
  }
}

TEST_CASE("search only moves the preferences of sampled arms") {
  std::vector<std::vector<double>> table;
  Rng rng(6);
  for (int i = 0; i < 7; ++i) {
    std::vector<double> row(6);
    for (auto& v : row) v = rng.uniform();
    table.push_back(row);
  }
  ScriptedOracle oracle(table);
  SearchConfig cfg;
  cfg.samples = 3;
  cfg.steps = 200;
  cfg.alpha = 0.5;
  cfg.seed = 9;
  const SearchResult r = run_search(oracle, cfg);
  std::vector<double> prev(6, 0.0);
  for (const auto& step : r.trace.steps) {
    const std::set<std::size_t> sampled(step.sampled_arms.begin(), step.sampled_arms.end());
    const auto pi = policy_from_preferences(prev);
    for (std::size_t a = 1; a <= 6; ++a) {
      if (!sampled.count(a)) {
        CHECK(step.preferences[a - 1] == prev[a - 1]);
      } else {
        const std::size_t i = static_cast<std::size_t>(
            std::find(step.sampled_arms.begin(), step.sampled_arms.end(), a) - step.sampled_arms.begin());
        const double expect = prev[a - 1] + cfg.alpha * (step.rewards[i] - step.baseline) *
                                                pi[a - 1] * (1 - pi[a - 1]);
        CHECK(step.preferences[a - 1] == expect);
      }
    }
    prev = step.preferences;
  }
}

TEST_CASE("constant equal rewards leave the policy uniform") {
  ScriptedOracle oracle = ScriptedOracle::constant({0.7, 0.7, 0.7, 0.7});
  SearchConfig cfg;
  cfg.arms = 4;
  cfg.samples = 2;
  cfg.steps = 100;
  const SearchResult r = run_search(oracle, cfg);
  for (double h : r.final_state.preferences) CHECK(h == 0.0);
}

TEST_CASE("scripted rewards favour the planted arm") {
  ScriptedOracle oracle = ScriptedOracle::constant({0.5, 0.5, 0.8, 0.5, 0.5});
  SearchConfig cfg;
  cfg.arms = 5;
  cfg.samples = 3;
  cfg.steps = 2000;
  cfg.alpha = 5e-3;
  cfg.seed = 1;
  const SearchResult r = run_search(oracle, cfg);
  CHECK(r.best_arm == 3);
  const auto pi = r.final_state.policy();
  for (std::size_t i = 0; i < 5; ++i) {
    if (i != 2) CHECK(pi[2] > pi[i]);
  }
  for (std::size_t t = 1; t < r.trace.steps.size(); ++t) {
    CHECK(r.trace.steps[t].preferences[2] >= r.trace.steps[t - 1].preferences[2]);
  }
}

TEST_CASE("search is deterministic in its seed") {
  BernoulliOracle a({0.2, 0.6, 0.4}, 77), b({0.2, 0.6, 0.4}, 77);
  SearchConfig cfg;
  cfg.arms = 3;
  cfg.samples = 2;
  cfg.steps = 300;
  cfg.alpha = 0.1;
  cfg.seed = 5;
  std::ostringstream sa, sb;
  run_search(a, cfg).trace.write_csv(sa);
  run_search(b, cfg).trace.write_csv(sb);
  CHECK(sa.str() == sb.str());
  CHECK(line_count(sa.str()) == 2 + cfg.steps);
  CHECK(sa.str().rfind("# dvp search trace v1\nstep,trained_arm,sampled_arms,rewards,baseline,H_1,H_2,H_3,pi_1,pi_2,pi_3\n", 0) == 0);
}

TEST_CASE("search rejects bad configs and reports failing steps") {
  ScriptedOracle oracle = ScriptedOracle::constant({0.5, 0.5});
  SearchConfig cfg;
  cfg.arms = 2;
  cfg.samples = 3;
  CHECK_THROWS_AS(run_search(oracle, cfg), Error);
  cfg.samples = 1;
  cfg.alpha = -1.0;
  CHECK_THROWS_AS(run_search(oracle, cfg), Error);

  ThrowingOracle bad;
  cfg.alpha = 0.1;
  cfg.steps = 10;
  try {
    run_search(bad, cfg);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("step 3") != std::string::npos);
  }
  ScriptedOracle out_of_range = ScriptedOracle::constant({0.5, 1.5});
  cfg.samples = 2;
  CHECK_THROWS_AS(run_search(out_of_range, cfg), Error);
  CHECK_THROWS_AS(BernoulliOracle({0.5, 1.2}, 1), Error);
}
