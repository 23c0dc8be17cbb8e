#ifndef CTRLSIM_FIXTURES_HPP
#define CTRLSIM_FIXTURES_HPP

#include <optional>
#include <string>
#include <vector>

#include "ctrlsim/env_core.hpp"
#include "ctrlsim/labeling.hpp"
#include "ctrlsim/simulators.hpp"

namespace ctrlsim {

struct Fixture {
  std::string name;
  EnvironmentSpec spec;
  AgentPolicy behavior;
  AgentPolicy evaluation;
  PostHocLabeler labeler;
  std::optional<StepwiseLabeler> stepwise;
  std::optional<ParameterizedDynamics> dynamics;
  std::vector<AgentPolicy> extra_policies;

  const AgentPolicy& policy(const std::string& tag) const {
    if (behavior.tag == tag) return behavior;
    if (evaluation.tag == tag) return evaluation;
    for (const auto& p : extra_policies)
      if (p.tag == tag) return p;
    fail(ErrorKind::unknown_policy, "fixture '" + name + "' has no policy '" + tag + "'");
  }
};

namespace detail {

inline Distribution bernoulli_row(std::size_t n, Symbol off, Symbol on, double p_on) {
  Distribution row(n, 0.0);
  row[off] = 1.0 - p_on;
  row[on] = p_on;
  return row;
}

}  // namespace detail

/// One query q, then the agent recommends item 0 or 1; the user accepts (y1)
/// with probability 0.2 or 0.8. The label records acceptance.
inline Fixture recommender_fixture() {
  const Alphabet users({"q", "y0", "y1"});
  const Alphabet agents({"0", "1"});
  EnvironmentSpec spec = tabulate_environment(users, agents, 2, [](const History& h) {
    if (h.empty()) return point_mass(3, 0);
    return detail::bernoulli_row(3, 1, 2, h.action(1) == 1 ? 0.8 : 0.2);
  });
  auto make = [&](std::string tag, Distribution first) {
    return tabulate_policy(spec, std::move(tag), [first](const History& pre) {
      return pre.size() == 1 ? first : point_mass(2, 0);
    });
  };
  Fixture f{"recommender", spec, make("pi_b", {0.5, 0.5}), make("pi_e", {0.0, 1.0}), {}, {}, {}, {}};
  f.extra_policies.push_back(make("always0", {1.0, 0.0}));
  f.labeler = tabulate_labeler(spec, "accepted", Alphabet({"0", "1"}), [](const Trajectory& tau) {
    return point_mass(2, tau.user(2) == 2 ? 1 : 0);
  });
  return f;
}

/// Opening state A or B, one of two agent actions, then success or failure.
inline Fixture two_step_fixture() {
  const Alphabet users({"A", "B", "fail", "success"});
  const Alphabet agents({"a_b", "a_e"});
  // P(success | u_1, a_1)
  auto success = [](Symbol u, Symbol a) {
    if (a == 0) return u == 0 ? 1.0 : 0.5;
    return u == 0 ? 0.5 : 0.1;
  };
  EnvironmentSpec spec = tabulate_environment(users, agents, 2, [&](const History& h) {
    if (h.empty()) return Distribution{0.5, 0.5, 0.0, 0.0};
    return detail::bernoulli_row(4, 2, 3, success(h.user(1), h.action(1)));
  });
  auto constant = [&](std::string tag, Symbol a) {
    return tabulate_policy(spec, std::move(tag), [a](const History&) { return point_mass(2, a); });
  };
  Fixture f{"two-step", spec, constant("pi_b", 0), constant("pi_e", 1), {}, {}, {}, {}};
  f.labeler = tabulate_labeler(spec, "success", Alphabet({"0", "1"}), [](const Trajectory& tau) {
    return point_mass(2, tau.user(2) == 3 ? 1 : 0);
  });

  f.stepwise = tabulate_stepwise(spec, "mood", Alphabet({"calm", "upset"}), [](const History& pre) {
    static constexpr double upset[] = {0.2, 0.6, 0.7, 0.1};
    const double p = upset[pre.symbols().back()];
    return Distribution{1.0 - p, p};
  });

  ParameterizedDynamics pd{users, agents, 2, Alphabet({"patient", "impatient"}), Alphabet({"lenient", "strict"}),
                           0, 0, {}, {}};
  for (const auto& h : reachable_histories(spec, 2)) {
    for (Symbol c = 0; c < 2; ++c) {
      for (Symbol prev = 0; prev < 2; ++prev) {
        double to_impatient;
        if (h.empty()) to_impatient = prev == 0 ? 0.1 : 0.9;
        else if (prev == 1) to_impatient = 0.8;
        else if (h[1] == 1) to_impatient = c == 0 ? 0.2 : 0.6;
        else to_impatient = 0.1;
        SymbolSeq key{c, prev};
        key.insert(key.end(), h.begin(), h.end());
        pd.transition.emplace(std::move(key), Distribution{1.0 - to_impatient, to_impatient});
      }
    }
    for (Symbol z = 0; z < 2; ++z) {
      Distribution row;
      if (h.empty()) row = z == 0 ? Distribution{0.6, 0.4, 0.0, 0.0} : Distribution{0.3, 0.7, 0.0, 0.0};
      else row = detail::bernoulli_row(4, 2, 3, success(h[0], h[1]) * (z == 0 ? 1.0 : 0.5));
      SymbolSeq key{z};
      key.insert(key.end(), h.begin(), h.end());
      pd.response.emplace(std::move(key), std::move(row));
    }
  }
  f.dynamics = std::move(pd);
  return f;
}

/// Users A or B uniformly at every step. P_L(ẑ = 1 | τ) = ∏_t s(u_t, a_t), so
/// belief updates are the same at every step and V_t is constant.
inline Fixture chain_fixture(std::size_t horizon = 6) {
  const Alphabet users({"A", "B"});
  const Alphabet agents({"a_b", "a_e"});
  EnvironmentSpec spec = tabulate_environment(users, agents, horizon, [](const History&) {
    return uniform_distribution(2);
  });
  Fixture f{"chain",
            spec,
            tabulate_policy(spec, "pi_b", [](const History&) { return Distribution{0.98, 0.02}; }),
            tabulate_policy(spec, "pi_e", [](const History&) { return point_mass(2, 1); }),
            {},
            {},
            {},
            {}};
  f.labeler = tabulate_labeler(spec, "kept", Alphabet({"0", "1"}), [&](const Trajectory& tau) {
    static constexpr double s[2][2] = {{1.0, 0.5}, {0.5, 0.1}};  // [u][a]
    double p = 1.0;
    for (std::size_t t = 1; t <= horizon; ++t) p *= s[tau.user(t)][tau.action(t)];
    return Distribution{1.0 - p, p};
  });
  f.dynamics = lift_environment(spec);
  return f;
}

struct RandomSizes {
  std::size_t users = 2;
  std::size_t agents = 2;
  std::size_t controls = 2;
  std::size_t horizon = 3;
  std::size_t latent = 2;
  std::size_t profiles = 2;
};

namespace detail {

inline Alphabet numbered(const std::string& prefix, std::size_t n) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < n; ++i) names.push_back(prefix + std::to_string(i));
  return Alphabet(std::move(names));
}

}  // namespace detail

/// Strictly positive random parameterized user.
inline ParameterizedDynamics random_parameterized(Rng& rng, const EnvironmentSpec& shape, const RandomSizes& sizes) {
  ParameterizedDynamics pd{shape.users, shape.agents, shape.horizon, detail::numbered("z", sizes.latent),
                           detail::numbered("c", sizes.profiles), 0, 0, {}, {}};
  for (const auto& h : reachable_histories(shape, shape.horizon)) {
    for (Symbol c = 0; c < sizes.profiles; ++c) {
      for (Symbol prev = 0; prev < sizes.latent; ++prev) {
        SymbolSeq key{c, prev};
        key.insert(key.end(), h.begin(), h.end());
        pd.transition.emplace(std::move(key), random_distribution(rng, sizes.latent));
      }
    }
    for (Symbol z = 0; z < sizes.latent; ++z) {
      SymbolSeq key{z};
      key.insert(key.end(), h.begin(), h.end());
      pd.response.emplace(std::move(key), random_distribution(rng, sizes.users));
    }
  }
  return pd;
}

/// Seeded random environment with strictly positive dynamics, policies and labels.
inline Fixture random_fixture(std::uint64_t seed, const RandomSizes& sizes = {}) {
  Rng rng(seed);
  const Alphabet users = detail::numbered("u", sizes.users);
  const Alphabet agents = detail::numbered("a", sizes.agents);
  EnvironmentSpec spec = tabulate_environment(users, agents, sizes.horizon, [&](const History&) {
    return random_distribution(rng, sizes.users);
  });
  auto policy = [&](std::string tag) {
    return tabulate_policy(spec, std::move(tag), [&](const History&) { return random_distribution(rng, sizes.agents); });
  };
  Fixture f{"random-" + std::to_string(seed), spec, policy("pi_b"), policy("pi_e"), {}, {}, {}, {}};
  const Alphabet controls = detail::numbered("z", sizes.controls);
  f.labeler = tabulate_labeler(spec, "random", controls, [&](const Trajectory&) {
    return random_distribution(rng, sizes.controls);
  });
  f.stepwise = tabulate_stepwise(spec, "random-stepwise", controls, [&](const History&) {
    return random_distribution(rng, sizes.controls);
  });
  f.dynamics = random_parameterized(rng, spec, sizes);
  return f;
}

inline std::vector<std::string> builtin_fixture_names() { return {"chain", "recommender", "two-step"}; }

inline Fixture builtin_fixture(const std::string& name) {
  if (name == "recommender") return recommender_fixture();
  if (name == "two-step") return two_step_fixture();
  if (name == "chain") return chain_fixture();
  fail(ErrorKind::invalid_argument, "unknown built-in environment '" + name + "'");
}

}  // namespace ctrlsim

#endif  // CTRLSIM_FIXTURES_HPP
