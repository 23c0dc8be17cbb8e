#ifndef CTRLSIM_LABELING_HPP
#define CTRLSIM_LABELING_HPP

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "ctrlsim/env_core.hpp"
#include "ctrlsim/path_measure.hpp"

namespace ctrlsim {

inline constexpr double kActionDependenceTolerance = 1e-9;

/// P_L(ẑ | τ). Rows may be missing off the behavior support.
struct PostHocLabeler {
  std::string name;
  Alphabet controls;
  SeqMap<Distribution> table;

  const Distribution& at(const SymbolSeq& tau) const {
    auto it = table.find(tau);
    if (it == table.end()) fail(ErrorKind::missing_context, "labeler '" + name + "' undefined on a trajectory");
    return it->second;
  }
};

/// P_L(z_t | h_{t-1}, u_t), keyed on pre-action states only.
struct StepwiseLabeler {
  std::string name;
  Alphabet controls;
  SeqMap<Distribution> table;

  const Distribution& at(const SymbolSeq& pre_action) const {
    auto it = table.find(pre_action);
    if (it == table.end())
      fail(ErrorKind::missing_context, "step-wise labeler '" + name + "' undefined at a pre-action state");
    return it->second;
  }
};

/// A control fixed before the interaction: z ~ prior, then u_t ~ P(u_t | h_{t-1}, z).
struct AprioriControl {
  std::string name;
  Alphabet controls;
  Distribution prior;
  std::vector<EnvironmentSpec> dynamics;  // one per control symbol

  const EnvironmentSpec& environment(Symbol z) const { return dynamics.at(z); }
};

inline const Distribution& label_distribution(const PostHocLabeler& labeler, const Trajectory& tau) {
  return labeler.at(tau.symbols());
}

inline const Distribution& stepwise_label_distribution(const StepwiseLabeler& labeler, const History& h, Symbol u) {
  return labeler.at(h.with(u).symbols());
}

/// Tabulates `fn(τ)` on every trajectory reachable under any agent action.
template <class Fn>
PostHocLabeler tabulate_labeler(const EnvironmentSpec& spec, std::string name, Alphabet controls, Fn&& fn) {
  PostHocLabeler out{std::move(name), std::move(controls), {}};
  for (const auto& tau : all_trajectories(spec)) {
    Distribution row = fn(tau);
    if (row.size() != out.controls.size()) fail(ErrorKind::invalid_argument, "labeler row has wrong length");
    out.table.emplace(tau.symbols(), std::move(row));
  }
  return out;
}

inline PostHocLabeler constant_labeler(const EnvironmentSpec& spec, Alphabet controls, const Distribution& row,
                                       std::string name = "constant") {
  return tabulate_labeler(spec, std::move(name), std::move(controls), [&](const Trajectory&) { return row; });
}

/// Tabulates `fn(pre_action)` on every pre-action state reachable under any agent action.
template <class Fn>
StepwiseLabeler tabulate_stepwise(const EnvironmentSpec& spec, std::string name, Alphabet controls, Fn&& fn) {
  StepwiseLabeler out{std::move(name), std::move(controls), {}};
  for (const auto& h : reachable_histories(spec, spec.horizon)) {
    const Distribution& row = spec.dynamics(h);
    for (std::size_t u = 0; u < row.size(); ++u) {
      if (row[u] <= 0.0) continue;
      History pre(h);
      pre.push_back(static_cast<Symbol>(u));
      Distribution z = fn(pre);
      if (z.size() != out.controls.size()) fail(ErrorKind::invalid_argument, "step-wise row has wrong length");
      out.table.emplace(pre.symbols(), std::move(z));
    }
  }
  return out;
}

inline std::vector<Issue> check_labeler(const PostHocLabeler& labeler) {
  std::vector<Issue> issues;
  if (labeler.controls.size() == 0) issues.push_back({ErrorKind::invalid_argument, "empty control alphabet"});
  for (const auto& [tau, row] : labeler.table) {
    if (row.size() != labeler.controls.size())
      issues.push_back({ErrorKind::invalid_argument, "labeler '" + labeler.name + "' row has wrong length"});
    else if (auto p = distribution_problem(row))
      issues.push_back({ErrorKind::normalization, "labeler '" + labeler.name + "': " + *p});
  }
  return issues;
}

inline std::vector<Issue> check_labeler(const StepwiseLabeler& labeler) {
  std::vector<Issue> issues;
  if (labeler.controls.size() == 0) issues.push_back({ErrorKind::invalid_argument, "empty control alphabet"});
  for (const auto& [pre, row] : labeler.table) {
    if (pre.size() % 2 != 1)
      issues.push_back({ErrorKind::invalid_argument, "step-wise labeler keyed on a non pre-action state"});
    else if (row.size() != labeler.controls.size())
      issues.push_back({ErrorKind::invalid_argument, "step-wise labeler row has wrong length"});
    else if (auto p = distribution_problem(row))
      issues.push_back({ErrorKind::normalization, "step-wise labeler '" + labeler.name + "': " + *p});
  }
  return issues;
}

inline std::vector<Issue> check_apriori(const AprioriControl& control) {
  std::vector<Issue> issues;
  if (control.controls.size() == 0) issues.push_back({ErrorKind::invalid_argument, "empty control alphabet"});
  if (control.prior.size() != control.controls.size())
    issues.push_back({ErrorKind::invalid_argument, "a-priori prior has wrong length"});
  else if (auto p = distribution_problem(control.prior))
    issues.push_back({ErrorKind::normalization, "a-priori prior: " + *p});
  if (control.dynamics.size() != control.controls.size()) {
    issues.push_back({ErrorKind::invalid_argument, "a-priori control needs one dynamics table per control"});
    return issues;
  }
  for (std::size_t z = 0; z < control.dynamics.size(); ++z) {
    const auto& env = control.dynamics[z];
    if (!(env.users == control.dynamics.front().users) || !(env.agents == control.dynamics.front().agents) ||
        env.horizon != control.dynamics.front().horizon)
      issues.push_back({ErrorKind::invalid_argument, "a-priori dynamics tables disagree on alphabets or horizon"});
    for (auto& issue : check_environment(env)) {
      issue.message = "control '" + control.controls.name(static_cast<Symbol>(z)) + "': " + issue.message;
      issues.push_back(std::move(issue));
    }
  }
  return issues;
}

// ---------------------------------------------------------------------------
// Label masses over prefixes of P^π

struct LabelMass {
  double reach = 0.0;   // P^π(prefix)
  Distribution joint;   // P^π(prefix, ẑ)
};

/// One pass over P^π accumulating reach and label-weighted reach for every prefix.
inline SeqMap<LabelMass> label_prefix_masses(const EnvironmentSpec& spec, const AgentPolicy& policy,
                                             const PostHocLabeler& labeler) {
  const std::size_t nz = labeler.controls.size();
  SeqMap<LabelMass> out;
  for (const auto& wt : enumerate_trajectories(spec, policy)) {
    const Distribution& row = labeler.at(wt.trajectory.symbols());
    SymbolSeq prefix;
    const auto& s = wt.trajectory.symbols();
    for (std::size_t len = 0;; ++len) {
      auto& entry = out[prefix];
      if (entry.joint.empty()) entry.joint.assign(nz, 0.0);
      entry.reach += wt.probability;
      for (std::size_t z = 0; z < nz; ++z) entry.joint[z] += wt.probability * row[z];
      if (len == s.size()) break;
      prefix.push_back(s[len]);
    }
  }
  return out;
}

/// ∫ P_L(ẑ | τ) dP^π(τ)
inline Distribution learned_prior(const PostHocLabeler& labeler, const EnvironmentSpec& spec,
                                  const AgentPolicy& policy) {
  Distribution prior(labeler.controls.size(), 0.0);
  for (const auto& wt : enumerate_trajectories(spec, policy)) {
    const Distribution& row = labeler.at(wt.trajectory.symbols());
    for (std::size_t z = 0; z < prior.size(); ++z) prior[z] += wt.probability * row[z];
  }
  return prior;
}

/// Joint measure of (ẑ, τ) under P^π and P_L, keyed [ẑ] + τ.
inline PathMeasure labeled_measure(const EnvironmentSpec& spec, const AgentPolicy& policy,
                                   const PostHocLabeler& labeler) {
  PathMeasure m(PathLayout{.global_control = true}, spec.horizon);
  for (const auto& wt : enumerate_trajectories(spec, policy)) {
    const Distribution& row = labeler.at(wt.trajectory.symbols());
    for (std::size_t z = 0; z < row.size(); ++z) {
      SymbolSeq key{static_cast<Symbol>(z)};
      key.insert(key.end(), wt.trajectory.symbols().begin(), wt.trajectory.symbols().end());
      m.add(key, wt.probability * row[z]);
    }
  }
  return m;
}

struct ActionDependenceWitness {
  std::size_t step = 0;
  History pre_action;  // (h_{t-1}, u_t)
  Symbol action = 0;
  Symbol control = 0;
  double with_action = 0.0;     // P^{π_b}(ẑ | h_{t-1}, u_t, a_t)
  double without_action = 0.0;  // P^{π_b}(ẑ | h_{t-1}, u_t)
};

struct ActionDependence {
  bool dependent = false;
  std::optional<ActionDependenceWitness> witness;
};

/// Tests P^{π_b}(ẑ | h, u, a) = P^{π_b}(ẑ | h, u) on every π_b-reachable state at
/// steps ≥ `first_step`. The reported witness is the largest violation; ties
/// go to the earliest step, then the later control and action symbols.
inline ActionDependence is_action_dependent(const PostHocLabeler& labeler, const EnvironmentSpec& spec,
                                            const AgentPolicy& behavior, std::size_t first_step = 1) {
  const auto masses = label_prefix_masses(spec, behavior, labeler);
  std::vector<std::pair<SymbolSeq, const LabelMass*>> states;
  for (const auto& [key, entry] : masses)
    if (key.size() % 2 == 1 && (key.size() + 1) / 2 >= first_step && entry.reach > 0.0) states.emplace_back(key, &entry);
  std::sort(states.begin(), states.end(), [](const auto& l, const auto& r) {
    return l.first.size() != r.first.size() ? l.first.size() < r.first.size() : l.first < r.first;
  });

  ActionDependence result;
  double best = kActionDependenceTolerance;
  for (const auto& [pre, entry] : states) {
    const std::size_t step = (pre.size() + 1) / 2;
    for (std::size_t z = 0; z < labeler.controls.size(); ++z) {
      const double without = entry->joint[z] / entry->reach;
      for (std::size_t a = 0; a < spec.agents.size(); ++a) {
        SymbolSeq key = pre;
        key.push_back(static_cast<Symbol>(a));
        auto it = masses.find(key);
        if (it == masses.end() || !(it->second.reach > 0.0)) continue;
        const double with = it->second.joint[z] / it->second.reach;
        const double diff = std::abs(with - without);
        if (diff <= kActionDependenceTolerance) continue;
        const bool earlier_tie = result.witness && result.witness->step == step;
        if (!result.witness || diff > best + 1e-12 || (std::abs(diff - best) <= 1e-12 && earlier_tie)) {
          best = std::max(best, diff);
          result.dependent = true;
          result.witness = ActionDependenceWitness{step, History(pre), static_cast<Symbol>(a), static_cast<Symbol>(z),
                                                   with, without};
        }
      }
    }
  }
  return result;
}

/// z_t ~ P^{π_b}(ẑ | h_{t-1}, u_t): the post-hoc label's belief at each
/// pre-action state, defined wherever π_b reaches.
inline StepwiseLabeler derive_stepwise_labeler(const EnvironmentSpec& spec, const AgentPolicy& behavior,
                                               const PostHocLabeler& labeler) {
  StepwiseLabeler out{labeler.name + "-stepwise", labeler.controls, {}};
  for (const auto& [key, entry] : label_prefix_masses(spec, behavior, labeler)) {
    if (key.size() % 2 == 1 && entry.reach > 0.0) {
      Distribution row(entry.joint.size());
      for (std::size_t z = 0; z < row.size(); ++z) row[z] = entry.joint[z] / entry.reach;
      out.table.emplace(key, std::move(row));
    }
  }
  return out;
}

/// Views z_t as a post-hoc label of the trajectory truncated at step t.
/// Returns the truncated environment together with the lifted labeler.
inline std::pair<EnvironmentSpec, PostHocLabeler> lift_stepwise(const StepwiseLabeler& labeler,
                                                                const EnvironmentSpec& spec, std::size_t step) {
  EnvironmentSpec truncated = truncate(spec, step);
  PostHocLabeler lifted = tabulate_labeler(
      truncated, labeler.name + "@" + std::to_string(step), labeler.controls,
      [&](const Trajectory& tau) { return labeler.at(tau.pre_action(step).symbols()); });
  return {std::move(truncated), std::move(lifted)};
}

// ---------------------------------------------------------------------------
// A-priori controls

/// Joint measure of (z, τ) under the a-priori control and π, keyed [z] + τ.
inline PathMeasure apriori_measure(const AprioriControl& control, const AgentPolicy& policy,
                                   std::optional<std::size_t> steps = std::nullopt) {
  const auto& base = control.dynamics.front();
  PathMeasure m(PathLayout{.global_control = true}, steps.value_or(base.horizon));
  for (std::size_t z = 0; z < control.controls.size(); ++z) {
    if (control.prior[z] <= 0.0) continue;
    for (const auto& wt : enumerate_trajectories(control.dynamics[z], policy, steps)) {
      SymbolSeq key{static_cast<Symbol>(z)};
      key.insert(key.end(), wt.trajectory.symbols().begin(), wt.trajectory.symbols().end());
      m.add(key, control.prior[z] * wt.probability);
    }
  }
  return m;
}

namespace detail {

/// Unnormalized posterior weights prior(z) ∏ P(u_k | h_{k-1}, z) along `h`.
inline Distribution apriori_weights(const AprioriControl& control, const SymbolSeq& h) {
  Distribution w = control.prior;
  SymbolSeq prefix;
  for (std::size_t i = 0; i < h.size(); ++i) {
    if (i % 2 == 0) {
      for (std::size_t z = 0; z < w.size(); ++z) {
        if (w[z] <= 0.0) continue;
        w[z] *= control.dynamics[z].dynamics(prefix)[h[i]];
      }
    }
    prefix.push_back(h[i]);
  }
  return w;
}

}  // namespace detail

/// The population dynamics P(u_t | h_{t-1}) = Σ_z P(z | h_{t-1}) P(u_t | h_{t-1}, z).
inline EnvironmentSpec mixture_environment(const AprioriControl& control) {
  const auto& base = control.dynamics.front();
  EnvironmentSpec out{base.users, base.agents, base.horizon, {}};
  SymbolSeq h;
  auto walk = [&](auto&& self) -> void {
    if (h.size() == 2 * base.horizon) return;
    const Distribution w = normalized(detail::apriori_weights(control, h));
    Distribution row(base.users.size(), 0.0);
    for (std::size_t z = 0; z < w.size(); ++z) {
      if (w[z] <= 0.0) continue;
      const Distribution& pz = control.dynamics[z].dynamics(h);
      for (std::size_t u = 0; u < row.size(); ++u) row[u] += w[z] * pz[u];
    }
    out.user_dynamics.emplace(h, row);
    for (std::size_t u = 0; u < row.size(); ++u) {
      if (row[u] <= 0.0) continue;
      h.push_back(static_cast<Symbol>(u));
      for (std::size_t a = 0; a < base.agents.size(); ++a) {
        h.push_back(static_cast<Symbol>(a));
        self(self);
        h.pop_back();
      }
      h.pop_back();
    }
  };
  walk(walk);
  return out;
}

/// P_L(z | τ) = posterior of the a-priori control given the full trajectory.
inline PostHocLabeler lift_apriori(const AprioriControl& control) {
  const EnvironmentSpec mixture = mixture_environment(control);
  return tabulate_labeler(mixture, control.name + "-posterior", control.controls, [&](const Trajectory& tau) {
    return normalized(detail::apriori_weights(control, tau.symbols()));
  });
}

/// The user's opening symbol as an a-priori control: z = u_1, prior P(u_1),
/// and each control's dynamics pin u_1 = z and otherwise follow `spec`.
inline AprioriControl apriori_from_initial_intent(const EnvironmentSpec& spec, std::string name = "intent") {
  const Distribution& opening = spec.dynamics({});
  std::vector<std::string> names;
  std::vector<Symbol> symbols;
  for (std::size_t u = 0; u < opening.size(); ++u) {
    if (opening[u] <= 0.0) continue;
    names.push_back(spec.users.name(static_cast<Symbol>(u)));
    symbols.push_back(static_cast<Symbol>(u));
  }
  AprioriControl out{std::move(name), Alphabet(names), {}, {}};
  for (Symbol u : symbols) {
    out.prior.push_back(opening[u]);
    EnvironmentSpec env{spec.users, spec.agents, spec.horizon, {}};
    for (const auto& [h, row] : spec.user_dynamics)
      if (!h.empty() && h.front() == u) env.user_dynamics.emplace(h, row);
    env.user_dynamics.emplace(SymbolSeq{}, point_mass(spec.users.size(), u));
    out.dynamics.push_back(std::move(env));
  }
  return out;
}

}  // namespace ctrlsim

#endif  // CTRLSIM_LABELING_HPP
