#include <gtest/gtest.h>

#include <map>

#include "ctrlsim/env_core.hpp"
#include "ctrlsim/fixtures.hpp"
#include "oracle.hpp"
#include "test_util.hpp"

using namespace ctrlsim;

TEST(Alphabet, RejectsBadSymbols) {
  EXPECT_ERROR_KIND(Alphabet({"a", "a"}), invalid_argument);
  EXPECT_ERROR_KIND(Alphabet({"a,b"}), invalid_argument);
  EXPECT_ERROR_KIND(Alphabet(std::vector<std::string>{}), invalid_argument);
  const Alphabet a({"x", "y"});
  EXPECT_EQ(a.index("y"), 1u);
  EXPECT_ERROR_KIND(a.index("z"), parse);
}

TEST(History, ParseFormatRoundTrip) {
  const Fixture f = two_step_fixture();
  const History h = parse_history(f.spec.users, f.spec.agents, "B,a_e,fail");
  EXPECT_EQ(h.symbols(), (SymbolSeq{1, 1, 2}));
  EXPECT_TRUE(h.is_pre_action());
  EXPECT_EQ(h.user(2), 2u);
  EXPECT_EQ(format_history(f.spec.users, f.spec.agents, h.symbols()), "B,a_e,fail");
  EXPECT_TRUE(parse_history(f.spec.users, f.spec.agents, "").empty());
  // agent position holds a user symbol
  EXPECT_ERROR_KIND(parse_history(f.spec.users, f.spec.agents, "A,B"), parse);
}

TEST(TrajectoryMeasure, MatchesBruteForceOnRandomEnvironments) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Fixture f = random_fixture(seed);
    double sum = 0.0;
    for (const auto& tau : oracle::trajectories(f.spec, f.spec.horizon)) {
      const double expected = oracle::prob(f.spec, f.behavior, tau);
      EXPECT_NEAR(trajectory_probability(f.spec, f.behavior, History(tau)), expected, 1e-15);
      sum += expected;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
    double enumerated = 0.0;
    for (const auto& wt : enumerate_trajectories(f.spec, f.evaluation)) {
      EXPECT_NEAR(wt.probability, oracle::prob(f.spec, f.evaluation, wt.trajectory.symbols()), 1e-15);
      enumerated += wt.probability;
    }
    EXPECT_NEAR(enumerated, 1.0, 1e-12);
  }
}

TEST(TrajectoryMeasure, ZeroOffSupport) {
  const Fixture f = two_step_fixture();
  // π_b never plays a_e
  EXPECT_EQ(trajectory_probability(f.spec, f.behavior, parse_history(f.spec.users, f.spec.agents, "A,a_e,fail,a_b")),
            0.0);
  EXPECT_EQ(enumerate_trajectories(f.spec, f.behavior).size(), 3u);  // A-success, B-fail, B-success
  EXPECT_ERROR_KIND(trajectory_probability(f.spec, f.behavior, History(SymbolSeq{0, 0, 3})), invalid_argument);
}

TEST(TrajectoryMeasure, LongHorizonsStayFinite) {
  // A stays uncertain while only A has been seen; after the first B the user repeats B
  const EnvironmentSpec spec = tabulate_environment(Alphabet({"A", "B"}), Alphabet({"x"}), 20, [](const History& h) {
    for (Symbol s : h.symbols())
      if (s == 1) return point_mass(2, 1);
    return Distribution{0.25, 0.75};
  });
  const AgentPolicy pi = tabulate_policy(spec, "x", [](const History&) { return point_mass(1, 0); });
  EXPECT_NEAR(std::log(trajectory_probability(spec, pi, History(SymbolSeq(40, 0)))), 20 * std::log(0.25), 1e-9);
  SymbolSeq late_b(40, 0);
  for (std::size_t i = 20; i < 40; i += 2) late_b[i] = 1;
  EXPECT_NEAR(trajectory_probability(spec, pi, History(late_b)), std::pow(0.25, 10) * 0.75, 1e-15);
}

TEST(Validation, CollectsEveryIssue) {
  Fixture f = two_step_fixture();
  EnvironmentSpec spec = f.spec;
  spec.user_dynamics.at({0, 0}) = {0.0, 0.0, 0.5, 0.4};
  spec.user_dynamics.erase({1, 1});
  const auto issues = check_environment(spec);
  ASSERT_EQ(issues.size(), 2u);
  EXPECT_EQ(issues[0].kind, ErrorKind::normalization);
  EXPECT_EQ(issues[1].kind, ErrorKind::missing_context);
  try {
    validate_environment(spec);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::normalization);
    EXPECT_EQ(e.details().size(), 2u);
  }
  EXPECT_NO_THROW(validate_environment(f.spec));
}

TEST(Validation, RejectsNegativeAndNonFiniteEntries) {
  EnvironmentSpec spec = two_step_fixture().spec;
  spec.user_dynamics.at({}) = {1.5, -0.5, 0.0, 0.0};
  EXPECT_ERROR_KIND(validate_environment(spec), normalization);
  spec.user_dynamics.at({}) = {std::nan(""), 1.0, 0.0, 0.0};
  EXPECT_ERROR_KIND(validate_environment(spec), normalization);
}

TEST(Validation, BudgetOnlyInExactMode) {
  const Alphabet users({"a", "b", "c", "d"});
  const Alphabet agents({"x", "y", "z", "w"});
  EnvironmentSpec spec{users, agents, 6, {}};  // 16^6 > budget
  const auto exact = check_environment(spec, ValidationMode::exact);
  ASSERT_FALSE(exact.empty());
  bool budget = false;
  for (const auto& i : exact) budget = budget || i.kind == ErrorKind::budget_exceeded;
  EXPECT_TRUE(budget);
  for (const auto& i : check_environment(spec, ValidationMode::sampling)) EXPECT_NE(i.kind, ErrorKind::budget_exceeded);
}

TEST(Validation, PolicyMustCoverReachableStates) {
  const Fixture f = two_step_fixture();
  AgentPolicy p = f.behavior;
  EXPECT_TRUE(check_policy(f.spec, p).empty());
  p.action_table.erase({1});
  const auto issues = check_policy(f.spec, p);
  ASSERT_EQ(issues.size(), 1u);
  EXPECT_EQ(issues[0].kind, ErrorKind::missing_context);
  p.action_table[{1}] = {0.7, 0.7};
  EXPECT_ERROR_KIND(validate_policy(f.spec, p), normalization);
}

TEST(Sampling, SeededAndUnbiased) {
  const Fixture f = random_fixture(11);
  EXPECT_EQ(sample_trajectory(f.spec, f.behavior, 42).symbols(), sample_trajectory(f.spec, f.behavior, 42).symbols());
  Rng rng(3);
  std::map<SymbolSeq, double> freq;
  const int n = 200000;
  for (int i = 0; i < n; ++i) freq[sample_trajectory(f.spec, f.behavior, rng).symbols()] += 1.0 / n;
  for (const auto& tau : oracle::trajectories(f.spec, f.spec.horizon)) {
    const double p = oracle::prob(f.spec, f.behavior, tau);
    // five standard errors
    EXPECT_NEAR(freq[tau], p, 5.0 * std::sqrt(p * (1 - p) / n) + 1e-12);
  }
}

TEST(Truncate, KeepsLeadingSteps) {
  const Fixture f = chain_fixture(4);
  const EnvironmentSpec t = truncate(f.spec, 2);
  EXPECT_EQ(t.horizon, 2u);
  EXPECT_NO_THROW(validate_environment(t));
  EXPECT_EQ(t.user_dynamics.size(), 1u + 4u);
  EXPECT_ERROR_KIND(truncate(f.spec, 5), invalid_argument);
}

TEST(Reachability, CoversAllActions) {
  const Fixture f = two_step_fixture();
  // h_0 plus (A|B) x (a_b|a_e)
  EXPECT_EQ(reachable_histories(f.spec, 2).size(), 5u);
  // A,a_b always succeeds; the other three can end either way, then either action follows
  EXPECT_EQ(all_trajectories(f.spec).size(), 14u);
}
