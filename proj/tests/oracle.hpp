// Brute-force reference computations for the tests. Everything here reads
// only the raw tables and enumerates every sequence of symbols, including
// impossible ones, so it shares no traversal or caching code with the library.
#ifndef CTRLSIM_TESTS_ORACLE_HPP
#define CTRLSIM_TESTS_ORACLE_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include "ctrlsim/env_core.hpp"
#include "ctrlsim/labeling.hpp"
#include "ctrlsim/simulators.hpp"

namespace oracle {

using ctrlsim::AgentPolicy;
using ctrlsim::Distribution;
using ctrlsim::EnvironmentSpec;
using ctrlsim::PostHocLabeler;
using ctrlsim::SeqMap;
using ctrlsim::Symbol;
using ctrlsim::SymbolSeq;

/// Every sequence whose positions alternate between alphabets of size `sizes[i % sizes.size()]`.
inline std::vector<SymbolSeq> odometer(const std::vector<std::size_t>& sizes, std::size_t length) {
  std::vector<SymbolSeq> out;
  SymbolSeq cur(length, 0);
  while (true) {
    out.push_back(cur);
    std::size_t i = length;
    while (i > 0) {
      --i;
      if (++cur[i] < sizes[i % sizes.size()]) break;
      cur[i] = 0;
      if (i == 0) return out;
    }
    if (length == 0) return out;
  }
}

inline std::vector<SymbolSeq> trajectories(const EnvironmentSpec& spec, std::size_t steps) {
  return odometer({spec.users.size(), spec.agents.size()}, 2 * steps);
}

inline double entry(const SeqMap<Distribution>& table, const SymbolSeq& key, Symbol s) {
  auto it = table.find(key);
  return it == table.end() ? 0.0 : it->second.at(s);
}

/// P^π of a flat prefix of any length.
inline double prob(const EnvironmentSpec& spec, const AgentPolicy& pi, const SymbolSeq& seq) {
  double p = 1.0;
  for (std::size_t i = 0; i < seq.size() && p > 0.0; ++i) {
    const SymbolSeq h(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(i));
    p *= entry(i % 2 == 0 ? spec.user_dynamics : pi.action_table, h, seq[i]);
  }
  return p;
}

inline SymbolSeq cat(SymbolSeq h, Symbol s) {
  h.push_back(s);
  return h;
}

/// joint(prefix, z) = Σ_{τ ⊇ prefix} P^π(τ) P_L(z | τ), by summing over every sequence.
class Joint {
 public:
  Joint(const EnvironmentSpec& spec, const AgentPolicy& pi, const PostHocLabeler& labeler) : nz_(labeler.controls.size()) {
    for (const auto& tau : trajectories(spec, spec.horizon)) {
      const double p = prob(spec, pi, tau);
      if (p <= 0.0) continue;
      for (std::size_t len = 0; len <= tau.size(); ++len) {
        const SymbolSeq key(tau.begin(), tau.begin() + static_cast<std::ptrdiff_t>(len));
        auto& row = joint_[key];
        row.resize(nz_, 0.0);
        reach_[key] += p;
        for (Symbol z = 0; z < nz_; ++z) row[z] += p * entry(labeler.table, tau, z);
      }
    }
  }

  double reach(const SymbolSeq& key) const {
    auto it = reach_.find(key);
    return it == reach_.end() ? 0.0 : it->second;
  }
  double joint(const SymbolSeq& key, Symbol z) const {
    auto it = joint_.find(key);
    return it == joint_.end() ? 0.0 : it->second.at(z);
  }
  double posterior(const SymbolSeq& key, Symbol z) const { return joint(key, z) / reach(key); }
  /// P^π(u | h, z)
  double user_given(const SymbolSeq& h, Symbol u, Symbol z) const { return joint(cat(h, u), z) / joint(h, z); }
  double prior(Symbol z) const { return joint({}, z); }

 private:
  std::size_t nz_;
  std::map<SymbolSeq, double> reach_;
  std::map<SymbolSeq, Distribution> joint_;
};

/// P_sim^π(τ) for the trajectory-conditioned kernel mixed over the learned prior.
inline double simulated_probability(const AgentPolicy& pi, const Joint& behavior,
                                    std::size_t nz, const SymbolSeq& tau) {
  double out = 0.0;
  for (Symbol z = 0; z < nz; ++z) {
    if (!(behavior.prior(z) > 0.0)) continue;
    double p = behavior.prior(z);
    for (std::size_t i = 0; i < tau.size() && p > 0.0; i += 2) {
      const SymbolSeq h(tau.begin(), tau.begin() + static_cast<std::ptrdiff_t>(i));
      p *= behavior.user_given(h, tau[i], z) * entry(pi.action_table, cat(h, tau[i]), tau[i + 1]);
    }
    out += p;
  }
  return out;
}

/// Σ_z P_L(z | τ) ∏_t P^{π_b}(z | h, u) / P^{π_b}(z | h, u, a)
inline double bias_rhs(const PostHocLabeler& labeler, const Joint& behavior, const SymbolSeq& tau) {
  double out = 0.0;
  for (Symbol z = 0; z < labeler.controls.size(); ++z) {
    const double l = entry(labeler.table, tau, z);
    if (l <= 0.0) continue;
    double prod = 1.0;
    for (std::size_t i = 0; i < tau.size(); i += 2) {
      const SymbolSeq pre(tau.begin(), tau.begin() + static_cast<std::ptrdiff_t>(i + 1));
      prod *= behavior.posterior(pre, z) / behavior.posterior(cat(pre, tau[i + 1]), z);
    }
    out += l * prod;
  }
  return out;
}

struct WeightMoments {
  double mass = 0.0;
  double mean = 0.0;
  double variance = 0.0;
  double eta = std::numeric_limits<double>::infinity();  // min V_t over visited states
  double max_rho_deviation = 0.0;
};

/// Moments of W_T = ∏ ρ_t under the trajectory-conditioned kernel at fixed z,
/// composed with π_e, where ρ_t = P^{π_e}(u | h, z) / P^{π_b}(u | h, z).
inline WeightMoments posthoc_weight(const EnvironmentSpec& spec, const AgentPolicy& evaluation, const Joint& behavior,
                                    const Joint& truth, Symbol z, std::size_t T) {
  WeightMoments m;
  double m2 = 0.0;
  for (const auto& tau : trajectories(spec, T)) {
    double p = 1.0, w = 1.0;
    for (std::size_t i = 0; i < tau.size() && p > 0.0; i += 2) {
      const SymbolSeq h(tau.begin(), tau.begin() + static_cast<std::ptrdiff_t>(i));
      const double sim = behavior.user_given(h, tau[i], z);
      p *= sim * entry(evaluation.action_table, cat(h, tau[i]), tau[i + 1]);
      if (p > 0.0) w *= truth.user_given(h, tau[i], z) / sim;
    }
    if (p <= 0.0) continue;
    m.mass += p;
    m.mean += p * w;
    m2 += p * w * w;
  }
  m.variance = m2 - m.mean * m.mean;
  // V_t at every state with positive simulated mass
  for (std::size_t t = 1; t <= T; ++t) {
    for (const auto& h : trajectories(spec, t - 1)) {
      double reach = 1.0;
      for (std::size_t i = 0; i < h.size() && reach > 0.0; i += 2) {
        const SymbolSeq g(h.begin(), h.begin() + static_cast<std::ptrdiff_t>(i));
        reach *= behavior.user_given(g, h[i], z) * entry(evaluation.action_table, cat(g, h[i]), h[i + 1]);
      }
      if (!(reach > 0.0)) continue;
      double e1 = 0.0, e2 = 0.0;
      for (Symbol u = 0; u < spec.users.size(); ++u) {
        const double sim = behavior.user_given(h, u, z);
        if (!(sim > 0.0)) continue;
        const double rho = truth.user_given(h, u, z) / sim;
        e1 += sim * rho;
        e2 += sim * rho * rho;
        m.max_rho_deviation = std::max(m.max_rho_deviation, std::abs(rho - 1.0));
      }
      m.eta = std::min(m.eta, e2 - e1 * e1);
    }
  }
  return m;
}

/// P^π(prefix | z_0, c) for a parameterized user, summing over every latent path.
inline double parameterized_prob(const ctrlsim::ParameterizedDynamics& pd, const AgentPolicy& pi, Symbol z0, Symbol c,
                                 const SymbolSeq& prefix) {
  const std::size_t steps = (prefix.size() + 1) / 2;
  double out = 0.0;
  for (const auto& path : odometer({pd.latent.size()}, steps)) {
    double p = 1.0;
    Symbol prev = z0;
    for (std::size_t t = 0; t < steps && p > 0.0; ++t) {
      const SymbolSeq h(prefix.begin(), prefix.begin() + static_cast<std::ptrdiff_t>(2 * t));
      SymbolSeq tk{c, prev};
      tk.insert(tk.end(), h.begin(), h.end());
      SymbolSeq rk{path[t]};
      rk.insert(rk.end(), h.begin(), h.end());
      p *= entry(pd.transition, tk, path[t]) * entry(pd.response, rk, prefix[2 * t]);
      if (2 * t + 1 < prefix.size()) p *= entry(pi.action_table, cat(h, prefix[2 * t]), prefix[2 * t + 1]);
      prev = path[t];
    }
    out += p;
  }
  return out;
}

}  // namespace oracle

#endif  // CTRLSIM_TESTS_ORACLE_HPP
