#include <gtest/gtest.h>

#include "ctrlsim/fixtures.hpp"
#include "ctrlsim/labeling.hpp"
#include "oracle.hpp"
#include "test_util.hpp"

using namespace ctrlsim;

TEST(LearnedPrior, MatchesBruteForce) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Fixture f = random_fixture(seed);
    const oracle::Joint joint(f.spec, f.behavior, f.labeler);
    const Distribution prior = learned_prior(f.labeler, f.spec, f.behavior);
    for (Symbol z = 0; z < prior.size(); ++z) EXPECT_NEAR(prior[z], joint.prior(z), 1e-14);
  }
}

TEST(LearnedPrior, Recommender) {
  const Fixture f = recommender_fixture();
  EXPECT_NEAR(learned_prior(f.labeler, f.spec, f.behavior)[1], 0.5, 1e-12);
  EXPECT_NEAR(learned_prior(f.labeler, f.spec, f.evaluation)[1], 0.8, 1e-12);
  EXPECT_NEAR(learned_prior(f.labeler, f.spec, f.policy("always0"))[1], 0.2, 1e-12);
}

TEST(LabeledMeasure, JointMassesMatchBruteForce) {
  const Fixture f = random_fixture(4);
  const oracle::Joint joint(f.spec, f.behavior, f.labeler);
  const PathMeasure m = labeled_measure(f.spec, f.behavior, f.labeler);
  EXPECT_NEAR(m.total(), 1.0, 1e-12);
  for (const auto& tau : oracle::trajectories(f.spec, 2)) {
    for (Symbol z = 0; z < 2; ++z) {
      SymbolSeq key{z};
      key.insert(key.end(), tau.begin(), tau.end());
      EXPECT_NEAR(m.mass(key), joint.joint(tau, z), 1e-14);
    }
  }
}

TEST(ActionDependence, RecommenderLabelLeaksTheAction) {
  const Fixture f = recommender_fixture();
  const ActionDependence d = is_action_dependent(f.labeler, f.spec, f.behavior);
  ASSERT_TRUE(d.dependent);
  ASSERT_TRUE(d.witness);
  EXPECT_EQ(d.witness->step, 1u);
  EXPECT_EQ(d.witness->action, 1u);
  EXPECT_EQ(d.witness->control, 1u);
  EXPECT_NEAR(d.witness->with_action, 0.8, 1e-12);
  EXPECT_NEAR(d.witness->without_action, 0.5, 1e-12);
}

TEST(ActionDependence, ConstantAndPreActionLabelsAreNot) {
  const Fixture f = random_fixture(9);
  EXPECT_FALSE(is_action_dependent(constant_labeler(f.spec, Alphabet({"x", "y"}), {0.3, 0.7}), f.spec, f.behavior)
                   .dependent);
  // a label that reads only u_1 carries nothing about a_1 given u_1
  const PostHocLabeler first = tabulate_labeler(f.spec, "first", Alphabet({"x", "y"}), [](const Trajectory& tau) {
    return point_mass(2, tau.user(1));
  });
  EXPECT_FALSE(is_action_dependent(first, f.spec, f.behavior).dependent);
  // random labels read the whole trajectory
  EXPECT_TRUE(is_action_dependent(f.labeler, f.spec, f.behavior).dependent);
}

TEST(ActionDependence, FirstStepFilter) {
  const Fixture f = recommender_fixture();
  // at step 2 every policy plays 0, so no dependence can show
  EXPECT_FALSE(is_action_dependent(f.labeler, f.spec, f.behavior, 2).dependent);
}

TEST(StepwiseLabeler, DerivedRowsAreBehaviorPosteriors) {
  const Fixture f = random_fixture(6);
  const oracle::Joint joint(f.spec, f.behavior, f.labeler);
  const StepwiseLabeler s = derive_stepwise_labeler(f.spec, f.behavior, f.labeler);
  EXPECT_TRUE(check_labeler(s).empty());
  std::size_t rows = 0;
  for (std::size_t t = 1; t <= f.spec.horizon; ++t) {
    for (const auto& h : oracle::trajectories(f.spec, t - 1)) {
      for (Symbol u = 0; u < f.spec.users.size(); ++u) {
        const SymbolSeq pre = oracle::cat(h, u);
        for (Symbol z = 0; z < 2; ++z) EXPECT_NEAR(s.at(pre)[z], joint.posterior(pre, z), 1e-13);
        ++rows;
      }
    }
  }
  EXPECT_EQ(rows, s.table.size());
}

TEST(StepwiseLabeler, LiftReadsThePreActionState) {
  const Fixture f = two_step_fixture();
  const auto [truncated, lifted] = lift_stepwise(*f.stepwise, f.spec, 1);
  EXPECT_EQ(truncated.horizon, 1u);
  EXPECT_NEAR(lifted.at({0, 1})[1], 0.2, 1e-15);
  EXPECT_NEAR(lifted.at({1, 0})[1], 0.6, 1e-15);
  const auto [full, lifted2] = lift_stepwise(*f.stepwise, f.spec, 2);
  EXPECT_NEAR(lifted2.at({0, 0, 3, 1})[1], 0.1, 1e-15);
  EXPECT_ERROR_KIND(lift_stepwise(*f.stepwise, f.spec, 3), invalid_argument);
}

TEST(Apriori, InitialIntentMixesBackToTheEnvironment) {
  const Fixture f = random_fixture(2);
  const AprioriControl a = apriori_from_initial_intent(f.spec);
  EXPECT_TRUE(check_apriori(a).empty());
  EXPECT_EQ(a.controls.size(), f.spec.users.size());
  const EnvironmentSpec mixed = mixture_environment(a);
  for (const auto& tau : oracle::trajectories(f.spec, f.spec.horizon))
    EXPECT_NEAR(oracle::prob(mixed, f.behavior, tau), oracle::prob(f.spec, f.behavior, tau), 1e-14);
  // the posterior of the intent given τ is a point mass on u_1
  const PostHocLabeler lifted = lift_apriori(a);
  for (const auto& [tau, row] : lifted.table) EXPECT_NEAR(row[tau.front()], 1.0, 1e-12);
}

TEST(Apriori, MeasureWeightsByPrior) {
  const Fixture f = two_step_fixture();
  const AprioriControl a = apriori_from_initial_intent(f.spec);
  const PathMeasure m = apriori_measure(a, f.evaluation);
  EXPECT_NEAR(m.total(), 1.0, 1e-12);
  EXPECT_NEAR(m.mass({0}), 0.5, 1e-12);
  // z = A, u_1 = A, a_e, success: 0.5 * 1 * 1 * 0.5
  EXPECT_NEAR(m.mass({0, 0, 1, 3}), 0.25, 1e-12);
  EXPECT_EQ(m.mass({0, 1}), 0.0);
}

TEST(Labeler, ChecksCatchBadRows) {
  Fixture f = two_step_fixture();
  EXPECT_TRUE(check_labeler(f.labeler).empty());
  f.labeler.table.begin()->second = {0.2, 0.2};
  const auto issues = check_labeler(f.labeler);
  ASSERT_EQ(issues.size(), 1u);
  EXPECT_EQ(issues[0].kind, ErrorKind::normalization);
  EXPECT_ERROR_KIND(f.labeler.at({0}), missing_context);
}
