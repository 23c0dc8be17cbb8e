#ifndef CTRLSIM_SIMULATORS_HPP
#define CTRLSIM_SIMULATORS_HPP

#include <algorithm>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ctrlsim/beliefs.hpp"
#include "ctrlsim/env_core.hpp"
#include "ctrlsim/labeling.hpp"
#include "ctrlsim/path_measure.hpp"

namespace ctrlsim {

enum class KernelKind { trajectory_conditioned, a_priori, dynamic_state, policy_conditioned, parameterized_dynamics };

inline std::string_view to_string(KernelKind kind) {
  switch (kind) {
    case KernelKind::trajectory_conditioned: return "trajectory_conditioned";
    case KernelKind::a_priori: return "a_priori";
    case KernelKind::dynamic_state: return "dynamic_state";
    case KernelKind::policy_conditioned: return "policy_conditioned";
    case KernelKind::parameterized_dynamics: return "parameterized_dynamics";
  }
  return "unknown";
}

/// Bipartite user model: latent state z_t ~ P_dyn(· | h_{t-1}, z_{t-1}, c),
/// then u_t ~ P_resp(· | h_{t-1}, z_t). z_0 and c are fixed before step 1.
struct ParameterizedDynamics {
  Alphabet users;
  Alphabet agents;
  std::size_t horizon = 0;
  Alphabet latent;
  Alphabet profiles;
  Symbol initial_state = 0;
  Symbol profile = 0;
  SeqMap<Distribution> transition;  // [c, z_{t-1}] + h_{t-1}  ->  over latent
  SeqMap<Distribution> response;    // [z_t] + h_{t-1}         ->  over users

  const Distribution& dyn(Symbol c, Symbol previous, const SymbolSeq& h) const {
    SymbolSeq key{c, previous};
    key.insert(key.end(), h.begin(), h.end());
    auto it = transition.find(key);
    if (it == transition.end()) fail(ErrorKind::missing_context, "state transition table undefined at a history");
    return it->second;
  }

  const Distribution& resp(Symbol z, const SymbolSeq& h) const {
    SymbolSeq key{z};
    key.insert(key.end(), h.begin(), h.end());
    auto it = response.find(key);
    if (it == response.end()) fail(ErrorKind::missing_context, "response table undefined at a history");
    return it->second;
  }

  /// Index of (z_0, c) in the kernel's control alphabet.
  Symbol control_index(Symbol z0, Symbol c) const { return static_cast<Symbol>(z0 * profiles.size() + c); }
  Symbol default_control() const { return control_index(initial_state, profile); }
};

inline std::vector<Issue> check_dynamics(const ParameterizedDynamics& pd) {
  std::vector<Issue> issues;
  if (pd.initial_state >= pd.latent.size() || pd.profile >= pd.profiles.size())
    issues.push_back({ErrorKind::invalid_argument, "initial state or profile outside its alphabet"});
  for (const auto* table : {&pd.transition, &pd.response}) {
    const std::size_t width = table == &pd.transition ? pd.latent.size() : pd.users.size();
    for (const auto& [key, row] : *table) {
      if (row.size() != width) issues.push_back({ErrorKind::invalid_argument, "dynamics row has wrong length"});
      else if (auto p = distribution_problem(row))
        issues.push_back({ErrorKind::normalization, std::string(table == &pd.transition ? "P_dyn" : "P_resp") + ": " + *p});
    }
  }
  return issues;
}

/// Control passed to a kernel. An empty `value` draws the control from the
/// kernel's prior; `policy_tag` selects the policy for policy-conditioned kernels.
struct Control {
  std::optional<Symbol> value;
  std::string policy_tag;

  static Control mixture(std::string tag = {}) { return Control{std::nullopt, std::move(tag)}; }
  static Control fixed(Symbol v, std::string tag = {}) { return Control{v, std::move(tag)}; }
};

struct KernelRow {
  std::string context;  // human-readable context label
  SymbolSeq key;
  const Distribution* probabilities;
};

/// Materialized control-conditioned user kernel over reachable states.
/// Emission rows are distributions over users, except for dynamic-state
/// kernels where they are joint over (z_t, u_t), z-major.
struct SimulatorKernel {
  KernelKind kind = KernelKind::trajectory_conditioned;
  Alphabet users;
  Alphabet agents;
  std::size_t horizon = 0;
  Alphabet controls;       // global controls; unused by dynamic-state kernels
  Alphabet step_controls;  // dynamic-state kernels only
  std::vector<std::string> policy_tags;
  std::vector<Distribution> priors;  // one per policy tag, or a single prior
  SeqMap<Distribution> rows;
  SeqMap<Distribution> latent_rows;  // parameterized dynamics: joint over (z_t, u_t)
  SeqSet zero_posterior;             // (control, h) keys whose control has zero posterior

  bool has_step_controls() const noexcept { return kind == KernelKind::dynamic_state; }
  bool has_global_control() const noexcept { return kind != KernelKind::dynamic_state; }

  std::size_t tag_index(const std::string& tag) const {
    if (kind != KernelKind::policy_conditioned) return 0;
    for (std::size_t i = 0; i < policy_tags.size(); ++i)
      if (policy_tags[i] == tag) return i;
    fail(ErrorKind::unknown_policy, "kernel has no policy tagged '" + tag + "'");
  }

  const Distribution& prior(const Control& control = {}) const {
    if (!has_global_control()) fail(ErrorKind::invalid_argument, "dynamic-state kernels have no global prior");
    return priors.at(tag_index(control.policy_tag));
  }

  SymbolSeq row_key(const Control& control, const SymbolSeq& h) const {
    SymbolSeq key;
    if (kind == KernelKind::policy_conditioned) key.push_back(static_cast<Symbol>(tag_index(control.policy_tag)));
    if (has_global_control()) {
      if (!control.value) fail(ErrorKind::invalid_argument, "this query needs a specific control value");
      if (*control.value >= controls.size()) fail(ErrorKind::invalid_argument, "control value out of range");
      key.push_back(*control.value);
    } else if (control.value) {
      fail(ErrorKind::invalid_argument, "dynamic-state kernels generate their own step controls");
    }
    key.insert(key.end(), h.begin(), h.end());
    return key;
  }

  const Distribution& emission(const Control& control, const SymbolSeq& h) const {
    const SymbolSeq key = row_key(control, h);
    auto it = rows.find(key);
    if (it == rows.end()) missing(key);
    return it->second;
  }

  Distribution& mutable_emission(const Control& control, const SymbolSeq& h) {
    const SymbolSeq key = row_key(control, h);
    auto it = rows.find(key);
    if (it == rows.end()) missing(key);
    return it->second;
  }

  /// P_sim(z_t | h_{t-1}), dynamic-state kernels only.
  Distribution step_control_distribution(const SymbolSeq& h) const {
    if (!has_step_controls()) fail(ErrorKind::invalid_argument, "kernel has no step controls");
    const Distribution& joint = emission(Control{}, h);
    Distribution out(step_controls.size(), 0.0);
    for (std::size_t z = 0; z < out.size(); ++z)
      for (std::size_t u = 0; u < users.size(); ++u) out[z] += joint[z * users.size() + u];
    return out;
  }

  /// P_sim(u_t | h_{t-1}, control) or, for dynamic-state kernels, P_sim(u_t | h_{t-1}, z_t)
  /// (marginal over z_t when `step_control` is empty).
  Distribution user_distribution(const Control& control, const SymbolSeq& h,
                                 std::optional<Symbol> step_control = std::nullopt) const {
    const Distribution& row = emission(control, h);
    if (!has_step_controls()) return row;
    Distribution out(users.size(), 0.0);
    for (std::size_t z = 0; z < step_controls.size(); ++z) {
      if (step_control && *step_control != z) continue;
      for (std::size_t u = 0; u < users.size(); ++u) out[u] += row[z * users.size() + u];
    }
    if (!step_control) return out;
    const double mass = total(out);
    if (!(mass > 0.0)) fail(ErrorKind::zero_denominator, "step control has zero probability at this history");
    for (double& v : out) v /= mass;
    return out;
  }

  /// P(z_t, u_t | h_{t-1}, z_0, c), parameterized-dynamics kernels only.
  const Distribution& latent_joint(const Control& control, const SymbolSeq& h) const {
    if (kind != KernelKind::parameterized_dynamics) fail(ErrorKind::invalid_argument, "kernel has no latent state");
    const SymbolSeq key = row_key(control, h);
    auto it = latent_rows.find(key);
    if (it == latent_rows.end()) missing(key);
    return it->second;
  }

  std::string context_label(const SymbolSeq& key) const {
    std::size_t offset = 0;
    std::string label;
    if (kind == KernelKind::policy_conditioned) label += policy_tags.at(key.at(offset++)) + "|";
    if (has_global_control()) label += controls.name(key.at(offset++)) + "|";
    label += format_history(users, agents, SymbolSeq(key.begin() + static_cast<std::ptrdiff_t>(offset), key.end()));
    return label;
  }

  /// All emission rows sorted by context label.
  std::vector<KernelRow> sorted_rows() const {
    std::vector<KernelRow> out;
    out.reserve(rows.size());
    for (const auto& [key, row] : rows) out.push_back({context_label(key), key, &row});
    std::sort(out.begin(), out.end(), [](const KernelRow& l, const KernelRow& r) { return l.context < r.context; });
    return out;
  }

 private:
  [[noreturn]] void missing(const SymbolSeq& key) const {
    const std::string where = "'" + context_label(key) + "'";
    if (zero_posterior.contains(key)) fail(ErrorKind::zero_denominator, "control has zero posterior at " + where);
    if (kind == KernelKind::trajectory_conditioned || kind == KernelKind::policy_conditioned)
      fail(ErrorKind::support_violation, "kernel never visited " + where + " under its training policy");
    fail(ErrorKind::missing_context, "kernel undefined at " + where);
  }
};

namespace detail {

/// Appends Bayes rows P(u | h) P(ẑ | h, u) / P(ẑ | h) for every π-reachable h.
inline void add_posthoc_rows(SimulatorKernel& kernel, const EnvironmentSpec& spec, const BeliefTable& beliefs,
                             const SeqMap<LabelMass>& masses, const SymbolSeq& lead) {
  const std::size_t nz = kernel.controls.size();
  for (const auto& [h, entry] : masses) {
    if (h.size() % 2 != 0 || h.size() >= 2 * spec.horizon || !(entry.reach > 0.0)) continue;
    const Distribution& dyn = spec.dynamics(h);
    for (std::size_t z = 0; z < nz; ++z) {
      SymbolSeq key = lead;
      key.push_back(static_cast<Symbol>(z));
      key.insert(key.end(), h.begin(), h.end());
      const double before = entry.joint[z] / entry.reach;
      if (!(before > 0.0)) {
        kernel.zero_posterior.insert(std::move(key));
        continue;
      }
      Distribution row(spec.users.size(), 0.0);
      for (std::size_t u = 0; u < row.size(); ++u) {
        if (dyn[u] <= 0.0) continue;
        SymbolSeq next = h;
        next.push_back(static_cast<Symbol>(u));
        if (!(beliefs.reach(next) > 0.0)) continue;
        row[u] = dyn[u] * beliefs.posterior(next, static_cast<Symbol>(z)) / before;
      }
      kernel.rows.emplace(std::move(key), std::move(row));
    }
  }
}

}  // namespace detail

/// P_sim(u | h, ẑ) = P(u | h) M_t^{π_b}(u): what likelihood training on π_b
/// logs labeled post hoc converges to. Carries the learned prior.
inline SimulatorKernel trajectory_conditioned_kernel(const EnvironmentSpec& spec, const AgentPolicy& behavior,
                                                     const PostHocLabeler& labeler) {
  require_exact_budget(spec.users.size(), spec.agents.size(), spec.horizon);
  SimulatorKernel k;
  k.kind = KernelKind::trajectory_conditioned;
  k.users = spec.users;
  k.agents = spec.agents;
  k.horizon = spec.horizon;
  k.controls = labeler.controls;
  k.policy_tags = {behavior.tag};
  const auto masses = label_prefix_masses(spec, behavior, labeler);
  const BeliefTable beliefs(spec, behavior, labeler);
  k.priors = {beliefs.posterior({})};
  detail::add_posthoc_rows(k, spec, beliefs, masses, {});
  return k;
}

/// Trajectory-conditioned dynamics built separately under each named policy;
/// queries select the policy by tag.
inline SimulatorKernel policy_conditioned_kernel(const EnvironmentSpec& spec, const PostHocLabeler& labeler,
                                                 const std::vector<AgentPolicy>& policies) {
  require_exact_budget(spec.users.size(), spec.agents.size(), spec.horizon);
  SimulatorKernel k;
  k.kind = KernelKind::policy_conditioned;
  k.users = spec.users;
  k.agents = spec.agents;
  k.horizon = spec.horizon;
  k.controls = labeler.controls;
  for (std::size_t i = 0; i < policies.size(); ++i) {
    const auto& policy = policies[i];
    if (std::find(k.policy_tags.begin(), k.policy_tags.end(), policy.tag) != k.policy_tags.end())
      fail(ErrorKind::invalid_argument, "duplicate policy tag '" + policy.tag + "'");
    k.policy_tags.push_back(policy.tag);
    const auto masses = label_prefix_masses(spec, policy, labeler);
    const BeliefTable beliefs(spec, policy, labeler);
    k.priors.push_back(beliefs.posterior({}));
    detail::add_posthoc_rows(k, spec, beliefs, masses, {static_cast<Symbol>(i)});
  }
  return k;
}

/// Dispatches on z to the control's own dynamics; no policy enters.
inline SimulatorKernel apriori_kernel(const AprioriControl& control) {
  raise_issues(check_apriori(control), "invalid a-priori control");
  const auto& base = control.dynamics.front();
  SimulatorKernel k;
  k.kind = KernelKind::a_priori;
  k.users = base.users;
  k.agents = base.agents;
  k.horizon = base.horizon;
  k.controls = control.controls;
  k.priors = {control.prior};
  for (std::size_t z = 0; z < control.dynamics.size(); ++z) {
    for (const auto& [h, row] : control.dynamics[z].user_dynamics) {
      SymbolSeq key{static_cast<Symbol>(z)};
      key.insert(key.end(), h.begin(), h.end());
      k.rows.emplace(std::move(key), row);
    }
  }
  return k;
}

/// Joint P(z_t, u_t | h_{t-1}) = P(z_t | h_{t-1}) P(u_t | h_{t-1}, z_t) with
/// z_t ~ P_L(· | h_{t-1}, u_t). Since P(u_t | h_{t-1}) does not depend on the
/// agent, the rows coincide with the behavior measure's conditionals wherever
/// π_b reaches and are tabulated on every history the dynamics define.
inline SimulatorKernel dynamic_state_kernel(const EnvironmentSpec& spec, const AgentPolicy& behavior,
                                            const StepwiseLabeler& stepwise) {
  require_exact_budget(spec.users.size(), spec.agents.size(), spec.horizon);
  validate_policy(spec, behavior);
  SimulatorKernel k;
  k.kind = KernelKind::dynamic_state;
  k.users = spec.users;
  k.agents = spec.agents;
  k.horizon = spec.horizon;
  k.step_controls = stepwise.controls;
  k.policy_tags = {behavior.tag};
  const std::size_t nu = spec.users.size();
  for (const auto& h : reachable_histories(spec, spec.horizon)) {
    const Distribution& dyn = spec.dynamics(h);
    Distribution joint(stepwise.controls.size() * nu, 0.0);
    for (std::size_t u = 0; u < nu; ++u) {
      if (dyn[u] <= 0.0) continue;
      SymbolSeq pre = h;
      pre.push_back(static_cast<Symbol>(u));
      const Distribution& z_row = stepwise.at(pre);
      for (std::size_t z = 0; z < z_row.size(); ++z) joint[z * nu + u] = dyn[u] * z_row[z];
    }
    k.rows.emplace(h, std::move(joint));
  }
  return k;
}

/// Latent-marginalized user kernel by forward filtering over z_t. The filter
/// never touches the policy: agent actions enter only through h.
inline SimulatorKernel parameterized_dynamics_kernel(const ParameterizedDynamics& pd) {
  raise_issues(check_dynamics(pd), "invalid parameterized dynamics");
  require_exact_budget(pd.users.size(), pd.agents.size(), pd.horizon);
  SimulatorKernel k;
  k.kind = KernelKind::parameterized_dynamics;
  k.users = pd.users;
  k.agents = pd.agents;
  k.horizon = pd.horizon;
  std::vector<std::string> names;
  for (const auto& z0 : pd.latent.names())
    for (const auto& c : pd.profiles.names()) names.push_back(z0 + "/" + c);
  k.controls = Alphabet(names);
  k.priors = {point_mass(names.size(), pd.default_control())};

  const std::size_t nz = pd.latent.size();
  const std::size_t nu = pd.users.size();
  for (Symbol z0 = 0; z0 < nz; ++z0) {
    for (Symbol c = 0; c < pd.profiles.size(); ++c) {
      const Symbol idx = pd.control_index(z0, c);
      SymbolSeq h;
      auto walk = [&](auto&& self, const Distribution& filter) -> void {
        if (h.size() == 2 * pd.horizon) return;
        Distribution predicted(nz, 0.0);
        for (Symbol prev = 0; prev < nz; ++prev) {
          if (filter[prev] <= 0.0) continue;
          const Distribution& step = pd.dyn(c, prev, h);
          for (std::size_t z = 0; z < nz; ++z) predicted[z] += filter[prev] * step[z];
        }
        Distribution joint(nz * nu, 0.0);
        Distribution marginal(nu, 0.0);
        for (Symbol z = 0; z < nz; ++z) {
          if (predicted[z] <= 0.0) continue;
          const Distribution& r = pd.resp(z, h);
          for (std::size_t u = 0; u < nu; ++u) {
            joint[z * nu + u] = predicted[z] * r[u];
            marginal[u] += joint[z * nu + u];
          }
        }
        SymbolSeq key{idx};
        key.insert(key.end(), h.begin(), h.end());
        k.latent_rows.emplace(key, joint);
        k.rows.emplace(std::move(key), marginal);
        for (std::size_t u = 0; u < nu; ++u) {
          if (marginal[u] <= 0.0) continue;
          Distribution posterior(nz);
          for (std::size_t z = 0; z < nz; ++z) posterior[z] = joint[z * nu + u] / marginal[u];
          h.push_back(static_cast<Symbol>(u));
          for (std::size_t a = 0; a < pd.agents.size(); ++a) {
            h.push_back(static_cast<Symbol>(a));
            self(self, posterior);
            h.pop_back();
          }
          h.pop_back();
        }
      };
      walk(walk, point_mass(nz, z0));
    }
  }
  return k;
}

/// Joint measure of the parameterized user with policy π at fixed (z_0, c),
/// summing over every latent path. Keyed [control index] + τ.
inline PathMeasure parameterized_measure(const ParameterizedDynamics& pd, const AgentPolicy& policy, Symbol z0,
                                         Symbol c, std::optional<std::size_t> steps = std::nullopt) {
  const std::size_t T = steps.value_or(pd.horizon);
  require_exact_budget(pd.users.size() * pd.latent.size(), pd.agents.size(), T);
  PathMeasure m(PathLayout{.global_control = true}, T);
  SymbolSeq key{pd.control_index(z0, c)};
  auto walk = [&](auto&& self, Symbol previous, double mass) -> void {
    const SymbolSeq h(key.begin() + 1, key.end());
    if (h.size() == 2 * T) {
      m.add(key, mass);
      return;
    }
    const Distribution& step = pd.dyn(c, previous, h);
    for (Symbol z = 0; z < step.size(); ++z) {
      if (step[z] <= 0.0) continue;
      const Distribution& r = pd.resp(z, h);
      for (Symbol u = 0; u < r.size(); ++u) {
        if (r[u] <= 0.0) continue;
        key.push_back(u);
        const Distribution& act = policy.at(SymbolSeq(key.begin() + 1, key.end()));
        for (Symbol a = 0; a < act.size(); ++a) {
          if (act[a] <= 0.0) continue;
          key.push_back(a);
          self(self, z, mass * step[z] * r[u] * act[a]);
          key.pop_back();
        }
        key.pop_back();
      }
    }
  };
  walk(walk, z0, 1.0);
  return m;
}

/// P(u_t | h_{t-1}, z_0, c) by filtering the latent state along h.
inline Distribution parameterized_predictive(const ParameterizedDynamics& pd, Symbol z0, Symbol c,
                                             const SymbolSeq& h) {
  const std::size_t nz = pd.latent.size();
  Distribution filter = point_mass(nz, z0);
  SymbolSeq prefix;
  for (std::size_t i = 0;; i += 2) {
    Distribution predicted(nz, 0.0);
    for (Symbol prev = 0; prev < nz; ++prev) {
      if (filter[prev] <= 0.0) continue;
      const Distribution& step = pd.dyn(c, prev, prefix);
      for (std::size_t z = 0; z < nz; ++z) predicted[z] += filter[prev] * step[z];
    }
    Distribution marginal(pd.users.size(), 0.0);
    for (Symbol z = 0; z < nz; ++z) {
      if (predicted[z] <= 0.0) continue;
      const Distribution& r = pd.resp(z, prefix);
      for (std::size_t u = 0; u < marginal.size(); ++u) marginal[u] += predicted[z] * r[u];
    }
    if (i >= h.size()) return marginal;
    const Symbol u = h[i];
    if (!(marginal[u] > 0.0)) fail(ErrorKind::undefined_conditional, "history has zero probability for this user");
    for (Symbol z = 0; z < nz; ++z)
      filter[z] = predicted[z] <= 0.0 ? 0.0 : predicted[z] * pd.resp(z, prefix)[u] / marginal[u];
    prefix.push_back(u);
    if (i + 1 >= h.size()) fail(ErrorKind::invalid_argument, "predictive needs a history of completed steps");
    prefix.push_back(h[i + 1]);
  }
}

/// A memoryless parameterized user reproducing `spec`: one latent state whose
/// response table is the environment's dynamics.
inline ParameterizedDynamics lift_environment(const EnvironmentSpec& spec) {
  ParameterizedDynamics pd{spec.users, spec.agents, spec.horizon, Alphabet({"s"}), Alphabet({"c"}), 0, 0, {}, {}};
  for (const auto& h : reachable_histories(spec, spec.horizon)) {
    SymbolSeq t{0, 0};
    t.insert(t.end(), h.begin(), h.end());
    pd.transition.emplace(std::move(t), Distribution{1.0});
    SymbolSeq r{0};
    r.insert(r.end(), h.begin(), h.end());
    pd.response.emplace(std::move(r), spec.dynamics(h));
  }
  return pd;
}

/// The user population implied by a parameterized user at its default (z_0, c).
inline EnvironmentSpec parameterized_environment(const ParameterizedDynamics& pd) {
  const SimulatorKernel k = parameterized_dynamics_kernel(pd);
  EnvironmentSpec env{pd.users, pd.agents, pd.horizon, {}};
  for (const auto& [key, row] : k.rows)
    if (key.front() == pd.default_control()) env.user_dynamics.emplace(SymbolSeq(key.begin() + 1, key.end()), row);
  return env;
}

/// Joint measure of (z_{1:T}, τ) with z_t ~ P_L(· | h_{t-1}, u_t), keyed with
/// z_t interleaved before each u_t.
inline PathMeasure stepwise_measure(const EnvironmentSpec& spec, const AgentPolicy& policy,
                                    const StepwiseLabeler& stepwise, std::optional<std::size_t> steps = std::nullopt) {
  const std::size_t T = steps.value_or(spec.horizon);
  require_exact_budget(spec.users.size() * stepwise.controls.size(), spec.agents.size(), T);
  const PathLayout layout{.global_control = false, .step_controls = true};
  PathMeasure m(layout, T);
  SymbolSeq h;
  SymbolSeq zs;
  auto walk = [&](auto&& self, double mass) -> void {
    if (h.size() == 2 * T) {
      m.add(encode_path_key(layout, std::nullopt, zs, h), mass);
      return;
    }
    const Distribution& dyn = spec.dynamics(h);
    for (Symbol u = 0; u < dyn.size(); ++u) {
      if (dyn[u] <= 0.0) continue;
      h.push_back(u);
      const Distribution& z_row = stepwise.at(h);
      const Distribution& act = policy.at(h);
      for (Symbol z = 0; z < z_row.size(); ++z) {
        if (z_row[z] <= 0.0) continue;
        zs.push_back(z);
        for (Symbol a = 0; a < act.size(); ++a) {
          if (act[a] <= 0.0) continue;
          h.push_back(a);
          self(self, mass * dyn[u] * z_row[z] * act[a]);
          h.pop_back();
        }
        zs.pop_back();
      }
      h.pop_back();
    }
  };
  walk(walk, 1.0);
  return m;
}

// ---------------------------------------------------------------------------
// Composition with an evaluation policy

/// P_sim^{π}(τ | control) = ∏_t P_sim(u_t | h_{t-1}, control) π(a_t | h_{t-1}, u_t),
/// optionally mixing the control over the kernel's prior.
class ComposedMeasure {
 public:
  ComposedMeasure(SimulatorKernel kernel, AgentPolicy policy, Control control, std::size_t steps)
      : kernel_(std::move(kernel)), policy_(std::move(policy)), control_(std::move(control)), steps_(steps) {}

  const SimulatorKernel& kernel() const noexcept { return kernel_; }
  const AgentPolicy& policy() const noexcept { return policy_; }
  const Control& control() const noexcept { return control_; }
  std::size_t steps() const noexcept { return steps_; }

  PathLayout layout() const {
    return PathLayout{.global_control = kernel_.has_global_control(), .step_controls = kernel_.has_step_controls()};
  }

  /// Controls drawn at the start with their weights.
  std::vector<std::pair<std::optional<Symbol>, double>> initial_controls() const {
    if (!kernel_.has_global_control()) return {{std::nullopt, 1.0}};
    if (control_.value) return {{control_.value, 1.0}};
    std::vector<std::pair<std::optional<Symbol>, double>> out;
    const Distribution& prior = kernel_.prior(control_);
    for (Symbol v = 0; v < prior.size(); ++v)
      if (prior[v] > 0.0) out.emplace_back(v, prior[v]);
    return out;
  }

  Control control_for(std::optional<Symbol> value) const { return Control{value, control_.policy_tag}; }

  template <class Leaf>
  void walk(Leaf&& leaf) const {
    for (const auto& [value, weight] : initial_controls()) {
      const Control ctl = control_for(value);
      SymbolSeq h;
      SymbolSeq zs;
      auto step = [&](auto&& self, double mass) -> void {
        if (h.size() == 2 * steps_) {
          leaf(value, static_cast<const SymbolSeq&>(zs), static_cast<const SymbolSeq&>(h), mass);
          return;
        }
        const Distribution& row = kernel_.emission(ctl, h);
        const std::size_t nu = kernel_.users.size();
        for (std::size_t i = 0; i < row.size(); ++i) {
          if (row[i] <= 0.0) continue;
          const Symbol u = static_cast<Symbol>(i % nu);
          if (kernel_.has_step_controls()) zs.push_back(static_cast<Symbol>(i / nu));
          h.push_back(u);
          const Distribution& act = policy_.at(h);
          for (Symbol a = 0; a < act.size(); ++a) {
            if (act[a] <= 0.0) continue;
            h.push_back(a);
            self(self, mass * row[i] * act[a]);
            h.pop_back();
          }
          h.pop_back();
          if (kernel_.has_step_controls()) zs.pop_back();
        }
      };
      step(step, weight);
    }
  }

  /// Calls `visit(control, z_{1..t-1}, h_{t-1}, mass)` at every state before
  /// a user draw with positive mass, depth first.
  template <class Visit>
  void visit_states(Visit&& visit) const {
    for (const auto& [value, weight] : initial_controls()) {
      const Control ctl = control_for(value);
      SymbolSeq h;
      SymbolSeq zs;
      auto step = [&](auto&& self, double mass) -> void {
        if (h.size() == 2 * steps_) return;
        visit(value, static_cast<const SymbolSeq&>(zs), static_cast<const SymbolSeq&>(h), mass);
        const Distribution& row = kernel_.emission(ctl, h);
        const std::size_t nu = kernel_.users.size();
        for (std::size_t i = 0; i < row.size(); ++i) {
          if (row[i] <= 0.0) continue;
          if (kernel_.has_step_controls()) zs.push_back(static_cast<Symbol>(i / nu));
          h.push_back(static_cast<Symbol>(i % nu));
          const Distribution& act = policy_.at(h);
          for (Symbol a = 0; a < act.size(); ++a) {
            if (act[a] <= 0.0) continue;
            h.push_back(a);
            self(self, mass * row[i] * act[a]);
            h.pop_back();
          }
          h.pop_back();
          if (kernel_.has_step_controls()) zs.pop_back();
        }
      };
      step(step, weight);
    }
  }

  std::vector<std::pair<AnnotatedPath, double>> enumerate() const {
    std::vector<std::pair<AnnotatedPath, double>> out;
    walk([&](std::optional<Symbol> value, const SymbolSeq& zs, const SymbolSeq& h, double mass) {
      out.push_back({AnnotatedPath{value, zs, History(h)}, mass});
    });
    return out;
  }

  /// Prefix-mass view; `keep_control = false` marginalizes the global control.
  PathMeasure path_measure(bool keep_control = true) const {
    PathLayout l = layout();
    l.global_control = l.global_control && keep_control;
    PathMeasure m(l, steps_);
    walk([&](std::optional<Symbol> value, const SymbolSeq& zs, const SymbolSeq& h, double mass) {
      m.add(encode_path_key(l, value, zs, h), mass);
    });
    return m;
  }

  /// Marginal probability of τ (summed over controls).
  double trajectory_probability(const Trajectory& tau) const {
    const auto& s = tau.symbols();
    if (s.size() != 2 * steps_) fail(ErrorKind::invalid_argument, "trajectory length does not match the composition");
    double out = 0.0;
    for (const auto& [value, weight] : initial_controls()) {
      const Control ctl = control_for(value);
      double p = weight;
      SymbolSeq h;
      for (std::size_t i = 0; i < s.size() && p > 0.0; i += 2) {
        const double pu = kernel_.has_step_controls() ? kernel_.user_distribution(ctl, h)[s[i]]
                                                      : kernel_.emission(ctl, h)[s[i]];
        p *= pu;
        if (p <= 0.0) break;
        h.push_back(s[i]);
        p *= policy_.at(h)[s[i + 1]];
        h.push_back(s[i + 1]);
      }
      out += p;
    }
    return out;
  }

  AnnotatedPath sample(Rng& rng) const {
    AnnotatedPath path;
    const auto choices = initial_controls();
    if (choices.size() == 1) {
      path.control = choices.front().first;
    } else {
      Distribution w;
      for (const auto& c : choices) w.push_back(c.second);
      path.control = choices[rng.categorical(w)].first;
    }
    const Control ctl = control_for(path.control);
    const std::size_t nu = kernel_.users.size();
    History h;
    for (std::size_t t = 0; t < steps_; ++t) {
      const std::size_t i = rng.categorical(kernel_.emission(ctl, h.symbols()));
      if (kernel_.has_step_controls()) path.step_controls.push_back(static_cast<Symbol>(i / nu));
      h.push_back(static_cast<Symbol>(i % nu));
      h.push_back(static_cast<Symbol>(rng.categorical(policy_.at(h.symbols()))));
    }
    path.trajectory = std::move(h);
    return path;
  }

  double total_mass() const {
    double s = 0.0;
    walk([&](std::optional<Symbol>, const SymbolSeq&, const SymbolSeq&, double mass) { s += mass; });
    return s;
  }

 private:
  SimulatorKernel kernel_;
  AgentPolicy policy_;
  Control control_;
  std::size_t steps_;
};

inline ComposedMeasure compose(const SimulatorKernel& kernel, const AgentPolicy& policy, Control control,
                               std::optional<std::size_t> steps = std::nullopt) {
  const std::size_t T = steps.value_or(kernel.horizon);
  if (T == 0 || T > kernel.horizon) fail(ErrorKind::invalid_argument, "composition horizon out of range");
  if (kernel.kind == KernelKind::policy_conditioned) (void)kernel.tag_index(control.policy_tag);
  if (kernel.has_step_controls() && control.value)
    fail(ErrorKind::invalid_argument, "dynamic-state kernels generate their own step controls");
  if (control.value && *control.value >= kernel.controls.size())
    fail(ErrorKind::invalid_argument, "control value out of range");
  return ComposedMeasure(kernel, policy, std::move(control), T);
}

}  // namespace ctrlsim

#endif  // CTRLSIM_SIMULATORS_HPP
