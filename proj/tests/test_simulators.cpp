#include <gtest/gtest.h>

#include <map>

#include "ctrlsim/fixtures.hpp"
#include "ctrlsim/simulators.hpp"
#include "oracle.hpp"
#include "test_util.hpp"

using namespace ctrlsim;

namespace {

/// Every complete history of fewer than T steps with positive probability under π.
std::vector<SymbolSeq> visited(const EnvironmentSpec& spec, const AgentPolicy& pi) {
  std::vector<SymbolSeq> out;
  for (std::size_t t = 0; t < spec.horizon; ++t)
    for (const auto& h : oracle::trajectories(spec, t))
      if (oracle::prob(spec, pi, h) > 0.0) out.push_back(h);
  return out;
}

}  // namespace

TEST(TrajectoryConditioned, RowsAreBehaviorConditionals) {
  for (std::uint64_t seed = 40; seed < 45; ++seed) {
    const Fixture f = random_fixture(seed);
    const SimulatorKernel k = trajectory_conditioned_kernel(f.spec, f.behavior, f.labeler);
    const oracle::Joint joint(f.spec, f.behavior, f.labeler);
    for (Symbol z = 0; z < 2; ++z) {
      EXPECT_NEAR(k.prior()[z], joint.prior(z), 1e-14);
      for (const auto& h : visited(f.spec, f.behavior)) {
        const Distribution& row = k.emission(Control::fixed(z), h);
        EXPECT_TRUE(!distribution_problem(row, 1e-12));
        for (Symbol u = 0; u < 2; ++u) EXPECT_NEAR(row[u], joint.user_given(h, u, z), 1e-13);
      }
    }
  }
}

TEST(TrajectoryConditioned, RecommenderRows) {
  const Fixture f = recommender_fixture();
  const SimulatorKernel k = trajectory_conditioned_kernel(f.spec, f.behavior, f.labeler);
  // once the label says "accepted", the user accepts regardless of the item
  for (Symbol a = 0; a < 2; ++a) {
    EXPECT_NEAR(k.emission(Control::fixed(1), {0, a})[2], 1.0, 1e-12);
    EXPECT_NEAR(k.emission(Control::fixed(0), {0, a})[1], 1.0, 1e-12);
  }
  EXPECT_EQ(k.sorted_rows().front().context, "0|");
}

TEST(TrajectoryConditioned, Errors) {
  const Fixture f = two_step_fixture();
  const SimulatorKernel k = trajectory_conditioned_kernel(f.spec, f.behavior, f.labeler);
  // π_b never plays a_e, so the kernel has no data there
  EXPECT_ERROR_KIND(k.emission(Control::fixed(1), {0, 1}), support_violation);
  // A,a_b always succeeds: the failure label has no posterior mass
  EXPECT_ERROR_KIND(k.emission(Control::fixed(0), {0, 0}), zero_denominator);
  EXPECT_ERROR_KIND(k.emission(Control::mixture(), {}), invalid_argument);
  EXPECT_ERROR_KIND(k.emission(Control::fixed(7), {}), invalid_argument);
  EXPECT_ERROR_KIND(compose(k, f.evaluation, Control::fixed(1), 3), invalid_argument);
}

TEST(PolicyConditioned, RowsFollowTheTaggedPolicy) {
  const Fixture f = random_fixture(50);
  const SimulatorKernel k = policy_conditioned_kernel(f.spec, f.labeler, {f.behavior, f.evaluation});
  for (const AgentPolicy* pi : {&f.behavior, &f.evaluation}) {
    const oracle::Joint joint(f.spec, *pi, f.labeler);
    for (Symbol z = 0; z < 2; ++z) {
      EXPECT_NEAR(k.prior(Control::fixed(z, pi->tag))[z], joint.prior(z), 1e-14);
      for (const auto& h : visited(f.spec, *pi))
        for (Symbol u = 0; u < 2; ++u)
          EXPECT_NEAR(k.emission(Control::fixed(z, pi->tag), h)[u], joint.user_given(h, u, z), 1e-13);
    }
  }
  EXPECT_ERROR_KIND(k.emission(Control::fixed(0, "nobody"), {}), unknown_policy);
  EXPECT_ERROR_KIND(compose(k, f.evaluation, Control::fixed(0, "nobody")), unknown_policy);
  EXPECT_ERROR_KIND(policy_conditioned_kernel(f.spec, f.labeler, {f.behavior, f.behavior}), invalid_argument);
}

TEST(Apriori, RowsAreTheControlDynamics) {
  const Fixture f = two_step_fixture();
  const AprioriControl a = apriori_from_initial_intent(f.spec);
  const SimulatorKernel k = apriori_kernel(a);
  EXPECT_EQ(k.prior(), (Distribution{0.5, 0.5}));
  EXPECT_EQ(k.emission(Control::fixed(1), {}), point_mass(4, 1));
  EXPECT_NEAR(k.emission(Control::fixed(1), {1, 1})[3], 0.1, 1e-15);
  EXPECT_ERROR_KIND(k.emission(Control::fixed(1), {0, 1}), missing_context);
}

TEST(DynamicState, JointRows) {
  const Fixture f = two_step_fixture();
  const SimulatorKernel k = dynamic_state_kernel(f.spec, f.behavior, *f.stepwise);
  EXPECT_TRUE(k.has_step_controls());
  const Distribution& root = k.emission(Control{}, {});
  // [calm: A B fail success][upset: ...]
  EXPECT_NEAR(root[0], 0.5 * 0.8, 1e-15);
  EXPECT_NEAR(root[4], 0.5 * 0.2, 1e-15);
  EXPECT_NEAR(root[5], 0.5 * 0.6, 1e-15);
  const Distribution zc = k.step_control_distribution({});
  EXPECT_NEAR(zc[1], 0.4, 1e-15);
  const Distribution given_upset = k.user_distribution(Control{}, {}, 1);
  EXPECT_NEAR(given_upset[0], 0.25, 1e-15);
  EXPECT_NEAR(given_upset[1], 0.75, 1e-15);
  // rows exist off the behavior support as well
  EXPECT_NEAR(k.user_distribution(Control{}, {0, 1})[3], 0.5, 1e-15);
  EXPECT_ERROR_KIND(k.emission(Control::fixed(0), {}), invalid_argument);
  EXPECT_ERROR_KIND(k.prior(), invalid_argument);
}

TEST(Parameterized, RowsMatchLatentPathSums) {
  for (std::uint64_t seed = 60; seed < 63; ++seed) {
    const Fixture f = random_fixture(seed);
    const ParameterizedDynamics& pd = *f.dynamics;
    EXPECT_TRUE(check_dynamics(pd).empty());
    const SimulatorKernel k = parameterized_dynamics_kernel(pd);
    for (Symbol z0 = 0; z0 < 2; ++z0) {
      for (Symbol c = 0; c < 2; ++c) {
        const Control ctl = Control::fixed(pd.control_index(z0, c));
        for (const auto& h : visited(f.spec, f.behavior)) {
          const double ph = oracle::parameterized_prob(pd, f.behavior, z0, c, h);
          for (Symbol u = 0; u < 2; ++u) {
            const double expected = oracle::parameterized_prob(pd, f.behavior, z0, c, oracle::cat(h, u)) / ph;
            EXPECT_NEAR(k.emission(ctl, h)[u], expected, 1e-13);
            EXPECT_NEAR(parameterized_predictive(pd, z0, c, h)[u], expected, 1e-13);
          }
        }
      }
    }
  }
}

TEST(Parameterized, LiftReproducesTheEnvironment) {
  const Fixture f = two_step_fixture();
  const ParameterizedDynamics pd = lift_environment(f.spec);
  const EnvironmentSpec env = parameterized_environment(pd);
  for (const auto& [h, row] : f.spec.user_dynamics)
    for (std::size_t u = 0; u < row.size(); ++u) EXPECT_NEAR(env.dynamics(h)[u], row[u], 1e-15);
}

TEST(Parameterized, ChecksCatchBadTables) {
  ParameterizedDynamics pd = *two_step_fixture().dynamics;
  pd.response.begin()->second[0] += 0.5;
  EXPECT_FALSE(check_dynamics(pd).empty());
  EXPECT_ERROR_KIND(parameterized_dynamics_kernel(pd), normalization);
}

TEST(Composition, MatchesBruteForceMixture) {
  for (std::uint64_t seed = 70; seed < 75; ++seed) {
    const Fixture f = random_fixture(seed);
    const SimulatorKernel k = trajectory_conditioned_kernel(f.spec, f.behavior, f.labeler);
    const ComposedMeasure m = compose(k, f.evaluation, Control::mixture());
    const oracle::Joint joint(f.spec, f.behavior, f.labeler);
    EXPECT_NEAR(m.total_mass(), 1.0, 1e-12);
    const PathMeasure pm = m.path_measure(false);
    for (const auto& tau : oracle::trajectories(f.spec, f.spec.horizon)) {
      const double expected = oracle::simulated_probability(f.evaluation, joint, 2, tau);
      EXPECT_NEAR(m.trajectory_probability(History(tau)), expected, 1e-14);
      EXPECT_NEAR(pm.mass(tau), expected, 1e-14);
    }
  }
}

TEST(Composition, StepControlsInterleave) {
  const Fixture f = two_step_fixture();
  const ComposedMeasure m = compose(dynamic_state_kernel(f.spec, f.behavior, *f.stepwise), f.evaluation, Control{});
  const PathMeasure pm = m.path_measure();
  EXPECT_TRUE(pm.layout().step_controls);
  EXPECT_NEAR(pm.total(), 1.0, 1e-12);
  // z_1 = upset, u_1 = B, a_e, z_2 = upset, u_2 = fail: 0.5*0.6 * 1 * 0.9*0.7
  EXPECT_NEAR(pm.mass({1, 1, 1, 1, 2}), 0.3 * 0.9 * 0.7, 1e-15);
  const auto paths = m.enumerate();
  double s = 0.0;
  for (const auto& [p, w] : paths) {
    EXPECT_EQ(p.step_controls.size(), 2u);
    s += w;
  }
  EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(Composition, SamplingIsSeededAndUnbiased) {
  const Fixture f = random_fixture(80);
  const SimulatorKernel k = trajectory_conditioned_kernel(f.spec, f.behavior, f.labeler);
  const ComposedMeasure m = compose(k, f.evaluation, Control::mixture());
  Rng a(5), b(5);
  EXPECT_EQ(m.sample(a), m.sample(b));
  std::map<SymbolSeq, double> freq;
  Rng rng(9);
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const AnnotatedPath p = m.sample(rng);
    SymbolSeq key{*p.control};
    key.insert(key.end(), p.trajectory.symbols().begin(), p.trajectory.symbols().end());
    freq[key] += 1.0 / n;
  }
  const PathMeasure pm = m.path_measure();
  for (const auto& [key, q] : freq) {
    const double p = pm.mass(key);
    EXPECT_NEAR(q, p, 5.0 * std::sqrt(p * (1 - p) / n) + 1e-12);
  }
}

TEST(Kernel, MutableRowsAreVisibleToCompositions) {
  const Fixture f = two_step_fixture();
  SimulatorKernel k = trajectory_conditioned_kernel(f.spec, f.behavior, f.labeler);
  k.mutable_emission(Control::fixed(1), {})[0] *= 1.5;
  // P_sim(A | ẑ = 1) = 2/3 grows to 1 while every other row still sums to one
  EXPECT_NEAR(compose(k, f.behavior, Control::fixed(1)).total_mass(), 1.0 + 0.5 * 2.0 / 3.0, 1e-12);
}
