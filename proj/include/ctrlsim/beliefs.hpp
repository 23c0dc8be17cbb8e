#ifndef CTRLSIM_BELIEFS_HPP
#define CTRLSIM_BELIEFS_HPP

#include <map>
#include <memory>
#include <mutex>
#include <string>

#include "ctrlsim/env_core.hpp"
#include "ctrlsim/labeling.hpp"

namespace ctrlsim {

/// Exact posteriors P^π(ẑ | state) for every prefix state of one policy.
/// States are h_{t-1}, (h_{t-1}, u_t) or (h_{t-1}, u_t, a_t), all flat prefixes.
class BeliefTable {
 public:
  BeliefTable(const EnvironmentSpec& spec, const AgentPolicy& policy, const PostHocLabeler& labeler)
      : tag_(policy.tag), controls_(labeler.controls.size()), entries_(label_prefix_masses(spec, policy, labeler)) {}

  const std::string& policy_tag() const noexcept { return tag_; }

  double reach(const SymbolSeq& state) const {
    auto it = entries_.find(state);
    return it == entries_.end() ? 0.0 : it->second.reach;
  }

  double posterior(const SymbolSeq& state, Symbol z) const {
    const LabelMass& e = entry(state);
    return e.joint.at(z) / e.reach;
  }

  Distribution posterior(const SymbolSeq& state) const {
    const LabelMass& e = entry(state);
    Distribution out(controls_);
    for (std::size_t z = 0; z < controls_; ++z) out[z] = e.joint[z] / e.reach;
    return out;
  }

 private:
  const LabelMass& entry(const SymbolSeq& state) const {
    auto it = entries_.find(state);
    if (it == entries_.end() || !(it->second.reach > 0.0))
      fail(ErrorKind::undefined_conditional, "state has zero reach probability under policy '" + tag_ + "'");
    return it->second;
  }

  std::string tag_;
  std::size_t controls_;
  SeqMap<LabelMass> entries_;
};

/// Memoized belief tables keyed on policy tag; tags must identify policies
/// uniquely. Lookups are safe from several threads.
class BeliefEngine {
 public:
  BeliefEngine(EnvironmentSpec spec, PostHocLabeler labeler)
      : spec_(std::make_shared<const EnvironmentSpec>(std::move(spec))),
        labeler_(std::make_shared<const PostHocLabeler>(std::move(labeler))) {}

  const EnvironmentSpec& spec() const noexcept { return *spec_; }
  const PostHocLabeler& labeler() const noexcept { return *labeler_; }

  const BeliefTable& table(const AgentPolicy& policy) const {
    std::lock_guard lock(cache_->mutex);
    auto it = cache_->tables.find(policy.tag);
    if (it == cache_->tables.end())
      it = cache_->tables.emplace(policy.tag, std::make_shared<const BeliefTable>(*spec_, policy, *labeler_)).first;
    return *it->second;
  }

  Distribution posterior(const AgentPolicy& policy, const History& state) const {
    return table(policy).posterior(state.symbols());
  }

  double posterior(const AgentPolicy& policy, const History& state, Symbol z) const {
    return table(policy).posterior(state.symbols(), z);
  }

  /// M_t^π(u_t) = P^π(ẑ | h_{t-1}, u_t) / P^π(ẑ | h_{t-1})
  double belief_update(const AgentPolicy& policy, const History& h, Symbol u, Symbol z) const {
    const BeliefTable& t = table(policy);
    const double before = t.posterior(h.symbols(), z);
    if (!(before > 0.0)) fail(ErrorKind::zero_denominator, "control has zero posterior before the update");
    return t.posterior(h.with(u).symbols(), z) / before;
  }

 private:
  struct Cache {
    std::mutex mutex;
    std::map<std::string, std::shared_ptr<const BeliefTable>> tables;
  };

  std::shared_ptr<const EnvironmentSpec> spec_;
  std::shared_ptr<const PostHocLabeler> labeler_;
  std::shared_ptr<Cache> cache_ = std::make_shared<Cache>();
};

namespace detail {

/// Probability of reaching the flat prefix `state` under P^π.
inline double prefix_reach(const EnvironmentSpec& spec, const AgentPolicy& policy, const SymbolSeq& state) {
  double p = 1.0;
  SymbolSeq h;
  for (std::size_t i = 0; i < state.size(); ++i) {
    p *= (i % 2 == 0 ? spec.dynamics(h) : policy.at(h)).at(state[i]);
    if (p <= 0.0) return 0.0;
    h.push_back(state[i]);
  }
  return p;
}

}  // namespace detail

/// P^π(ẑ | state) from scratch: enumerates the completions of `state`,
/// weighting P_L(ẑ | τ) by completion probability.
inline Distribution posterior_belief(const EnvironmentSpec& spec, const AgentPolicy& policy,
                                     const PostHocLabeler& labeler, const History& state) {
  require_exact_budget(spec.users.size(), spec.agents.size(), spec.horizon);
  if (state.size() > 2 * spec.horizon) fail(ErrorKind::invalid_argument, "state longer than the horizon");
  if (!(detail::prefix_reach(spec, policy, state.symbols()) > 0.0))
    fail(ErrorKind::undefined_conditional, "state has zero reach probability under policy '" + policy.tag + "'");

  Distribution out(labeler.controls.size(), 0.0);
  SymbolSeq h = state.symbols();
  auto walk = [&](auto&& self, double mass) -> void {
    if (h.size() == 2 * spec.horizon) {
      const Distribution& row = labeler.at(h);
      for (std::size_t z = 0; z < out.size(); ++z) out[z] += mass * row[z];
      return;
    }
    const Distribution& row = h.size() % 2 == 0 ? spec.dynamics(h) : policy.at(h);
    for (std::size_t s = 0; s < row.size(); ++s) {
      if (row[s] <= 0.0) continue;
      h.push_back(static_cast<Symbol>(s));
      self(self, mass * row[s]);
      h.pop_back();
    }
  };
  walk(walk, 1.0);
  return out;
}

/// M_t^π(u_t) computed from scratch.
inline double belief_update(const EnvironmentSpec& spec, const AgentPolicy& policy, const PostHocLabeler& labeler,
                            const History& h, Symbol u, Symbol z) {
  const double before = posterior_belief(spec, policy, labeler, h).at(z);
  if (!(before > 0.0)) fail(ErrorKind::zero_denominator, "control has zero posterior before the update");
  return posterior_belief(spec, policy, labeler, h.with(u)).at(z) / before;
}

}  // namespace ctrlsim

#endif  // CTRLSIM_BELIEFS_HPP
