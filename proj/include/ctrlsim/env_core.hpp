#ifndef CTRLSIM_ENV_CORE_HPP
#define CTRLSIM_ENV_CORE_HPP

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ctrlsim/error.hpp"
#include "ctrlsim/probability.hpp"

namespace ctrlsim {

using Symbol = std::uint32_t;
using SymbolSeq = std::vector<Symbol>;

struct SeqHash {
  std::size_t operator()(const SymbolSeq& seq) const noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL ^ seq.size();
    for (Symbol s : seq) {
      h ^= static_cast<std::uint64_t>(s) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
      h *= 0x100000001b3ULL;
    }
    return static_cast<std::size_t>(h);
  }
};

template <class T>
using SeqMap = std::unordered_map<SymbolSeq, T, SeqHash>;
using SeqSet = std::unordered_set<SymbolSeq, SeqHash>;

/// Named finite symbol set. Symbols are dense indices into `names()`.
class Alphabet {
 public:
  Alphabet() = default;
  explicit Alphabet(std::vector<std::string> names) : names_(std::move(names)) {
    if (names_.empty()) fail(ErrorKind::invalid_argument, "alphabet must be non-empty");
    std::set<std::string_view> seen;
    for (const auto& n : names_) {
      if (n.empty()) fail(ErrorKind::invalid_argument, "alphabet symbols must be non-empty");
      if (n.find(',') != std::string::npos || n.find('\t') != std::string::npos)
        fail(ErrorKind::invalid_argument, "alphabet symbol '" + n + "' contains a separator");
      if (!seen.insert(n).second) fail(ErrorKind::invalid_argument, "duplicate alphabet symbol '" + n + "'");
    }
  }

  std::size_t size() const noexcept { return names_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::string& name(Symbol s) const { return names_.at(s); }

  std::optional<Symbol> find(std::string_view name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return static_cast<Symbol>(i);
    return std::nullopt;
  }

  Symbol index(std::string_view name) const {
    if (auto s = find(name)) return *s;
    fail(ErrorKind::parse, "unknown symbol '" + std::string(name) + "'");
  }

  friend bool operator==(const Alphabet&, const Alphabet&) = default;

 private:
  std::vector<std::string> names_;
};

/// Flat interaction history u1,a1,u2,a2,... An odd length means the last
/// user symbol is pending, i.e. the pre-action state (h_{t-1}, u_t).
class History {
 public:
  History() = default;
  explicit History(SymbolSeq symbols) : symbols_(std::move(symbols)) {}

  const SymbolSeq& symbols() const noexcept { return symbols_; }
  std::size_t size() const noexcept { return symbols_.size(); }
  bool empty() const noexcept { return symbols_.empty(); }
  bool is_pre_action() const noexcept { return symbols_.size() % 2 == 1; }
  std::size_t completed_steps() const noexcept { return symbols_.size() / 2; }

  // Steps are 1-based.
  Symbol user(std::size_t t) const { return symbols_.at(2 * (t - 1)); }
  Symbol action(std::size_t t) const { return symbols_.at(2 * (t - 1) + 1); }

  History prefix(std::size_t length) const {
    if (length > symbols_.size()) fail(ErrorKind::invalid_argument, "prefix longer than history");
    return History(SymbolSeq(symbols_.begin(), symbols_.begin() + static_cast<std::ptrdiff_t>(length)));
  }
  /// h_{t-1}
  History before_step(std::size_t t) const { return prefix(2 * (t - 1)); }
  /// (h_{t-1}, u_t)
  History pre_action(std::size_t t) const { return prefix(2 * t - 1); }

  History with(Symbol s) const {
    History h = *this;
    h.symbols_.push_back(s);
    return h;
  }
  void push_back(Symbol s) { symbols_.push_back(s); }
  void pop_back() { symbols_.pop_back(); }

  friend auto operator<=>(const History&, const History&) = default;

 private:
  SymbolSeq symbols_;
};

/// A complete history of exactly `horizon` steps.
using Trajectory = History;

/// Parses "u1,a1,u2" alternating user/agent symbol names. Empty string is h_0.
inline History parse_history(const Alphabet& users, const Alphabet& agents, std::string_view text) {
  History h;
  if (text.empty()) return h;
  std::size_t pos = 0;
  while (true) {
    const std::size_t comma = text.find(',', pos);
    const std::string_view token = text.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos);
    const Alphabet& alphabet = h.size() % 2 == 0 ? users : agents;
    h.push_back(alphabet.index(token));
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return h;
}

inline std::string format_history(const Alphabet& users, const Alphabet& agents, const SymbolSeq& symbols) {
  std::string out;
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (i) out += ',';
    out += (i % 2 == 0 ? users : agents).name(symbols[i]);
  }
  return out;
}

inline constexpr double kExactPathBudget = 2e6;

inline double path_count(std::size_t users, std::size_t actions, std::size_t steps) {
  return std::pow(static_cast<double>(users) * static_cast<double>(actions), static_cast<double>(steps));
}

inline void require_exact_budget(std::size_t users, std::size_t actions, std::size_t steps) {
  const double n = path_count(users, actions, steps);
  if (n > kExactPathBudget) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "(|U|*|A|)^T = %.0f paths exceeds the exact-mode budget of %.0f", n,
                  kExactPathBudget);
    fail(ErrorKind::budget_exceeded, buf);
  }
}

struct EnvironmentSpec {
  Alphabet users;
  Alphabet agents;
  std::size_t horizon = 0;
  /// P(u_t | h_{t-1}) keyed on complete histories of length 2(t-1).
  SeqMap<Distribution> user_dynamics;

  const Distribution& dynamics(const SymbolSeq& h) const {
    auto it = user_dynamics.find(h);
    if (it == user_dynamics.end())
      fail(ErrorKind::missing_context, "no user dynamics at history '" + format_history(users, agents, h) + "'");
    return it->second;
  }
};

struct AgentPolicy {
  std::string tag;
  /// π(a_t | h_{t-1}, u_t) keyed on pre-action states.
  SeqMap<Distribution> action_table;

  const Distribution& at(const SymbolSeq& pre_action) const {
    auto it = action_table.find(pre_action);
    if (it == action_table.end())
      fail(ErrorKind::missing_context, "policy '" + tag + "' undefined at a reachable pre-action state");
    return it->second;
  }
};

namespace detail {

template <class UserRow, class AgentRow, class Leaf>
void walk_paths_from(SymbolSeq& h, double mass, std::size_t steps, UserRow& user_row, AgentRow& agent_row,
                     Leaf& leaf) {
  if (h.size() == 2 * steps) {
    leaf(static_cast<const SymbolSeq&>(h), mass);
    return;
  }
  const Distribution& users = user_row(static_cast<const SymbolSeq&>(h));
  for (std::size_t u = 0; u < users.size(); ++u) {
    if (users[u] <= 0.0) continue;
    h.push_back(static_cast<Symbol>(u));
    const Distribution& actions = agent_row(static_cast<const SymbolSeq&>(h));
    for (std::size_t a = 0; a < actions.size(); ++a) {
      if (actions[a] <= 0.0) continue;
      h.push_back(static_cast<Symbol>(a));
      walk_paths_from(h, mass * users[u] * actions[a], steps, user_row, agent_row, leaf);
      h.pop_back();
    }
    h.pop_back();
  }
}

}  // namespace detail

/// Depth-first walk over every positive-probability path of `steps` steps.
/// `user_row(h)` and `agent_row(h, u)` return rows; `leaf(path, mass)` is
/// called once per complete path.
template <class UserRow, class AgentRow, class Leaf>
void walk_paths(std::size_t steps, UserRow&& user_row, AgentRow&& agent_row, Leaf&& leaf) {
  SymbolSeq h;
  h.reserve(2 * steps);
  detail::walk_paths_from(h, 1.0, steps, user_row, agent_row, leaf);
}

// ---------------------------------------------------------------------------
// Validation

enum class ValidationMode { exact, sampling };

struct Issue {
  ErrorKind kind;
  std::string message;
};

/// Collects every violation. Reachability is taken over all agent actions, so
/// the spec is usable with any policy.
inline std::vector<Issue> check_environment(const EnvironmentSpec& spec, ValidationMode mode = ValidationMode::exact) {
  std::vector<Issue> issues;
  if (spec.users.size() == 0 || spec.agents.size() == 0)
    issues.push_back({ErrorKind::invalid_argument, "alphabets must be non-empty"});
  if (spec.horizon == 0) issues.push_back({ErrorKind::invalid_argument, "horizon must be positive"});
  if (!issues.empty()) return issues;
  if (mode == ValidationMode::exact && path_count(spec.users.size(), spec.agents.size(), spec.horizon) > kExactPathBudget)
    issues.push_back({ErrorKind::budget_exceeded, "environment exceeds the exact-mode path budget"});

  // Sorted so the report order does not depend on hashing.
  std::vector<std::pair<std::string, const Distribution*>> rows;
  for (const auto& [h, row] : spec.user_dynamics) {
    const std::string where = "'" + format_history(spec.users, spec.agents, h) + "'";
    if (h.size() % 2 != 0 || h.size() >= 2 * spec.horizon) {
      issues.push_back({ErrorKind::invalid_argument, "dynamics keyed on invalid history " + where});
      continue;
    }
    rows.emplace_back(where, &row);
  }
  std::sort(rows.begin(), rows.end(), [](const auto& l, const auto& r) { return l.first < r.first; });
  for (const auto& [where, row] : rows) {
    if (row->size() != spec.users.size()) {
      issues.push_back({ErrorKind::invalid_argument, "dynamics row at " + where + " has wrong length"});
    } else if (auto problem = distribution_problem(*row)) {
      issues.push_back({ErrorKind::normalization, "dynamics row at " + where + ": " + *problem});
    }
  }

  SymbolSeq h;
  auto walk = [&](auto&& self) -> void {
    if (h.size() == 2 * spec.horizon) return;
    auto it = spec.user_dynamics.find(h);
    if (it == spec.user_dynamics.end()) {
      issues.push_back({ErrorKind::missing_context,
                        "no user dynamics at reachable history '" + format_history(spec.users, spec.agents, h) + "'"});
      return;
    }
    if (it->second.size() != spec.users.size()) return;
    for (std::size_t u = 0; u < spec.users.size(); ++u) {
      if (it->second[u] <= 0.0) continue;
      h.push_back(static_cast<Symbol>(u));
      for (std::size_t a = 0; a < spec.agents.size(); ++a) {
        h.push_back(static_cast<Symbol>(a));
        self(self);
        h.pop_back();
      }
      h.pop_back();
    }
  };
  walk(walk);

  std::stable_sort(issues.begin(), issues.end(), [](const Issue& l, const Issue& r) {
    auto rank = [](ErrorKind k) {
      switch (k) {
        case ErrorKind::normalization: return 0;
        case ErrorKind::missing_context: return 1;
        case ErrorKind::budget_exceeded: return 2;
        default: return 3;
      }
    };
    return rank(l.kind) < rank(r.kind);
  });
  return issues;
}

inline void raise_issues(const std::vector<Issue>& issues, const std::string& what) {
  if (issues.empty()) return;
  std::vector<std::string> details;
  details.reserve(issues.size());
  for (const auto& i : issues) details.push_back(std::string(to_string(i.kind)) + ": " + i.message);
  throw Error(issues.front().kind, what + ": " + issues.front().message +
                                       (issues.size() > 1 ? " (+" + std::to_string(issues.size() - 1) + " more)" : ""),
              std::move(details));
}

/// Returns `spec` iff every invariant holds; otherwise throws an Error listing all violations.
inline const EnvironmentSpec& validate_environment(const EnvironmentSpec& spec,
                                                   ValidationMode mode = ValidationMode::exact) {
  raise_issues(check_environment(spec, mode), "invalid environment");
  return spec;
}

inline std::vector<Issue> check_policy(const EnvironmentSpec& spec, const AgentPolicy& policy) {
  std::vector<Issue> issues;
  for (const auto& [pre, row] : policy.action_table) {
    if (pre.size() % 2 != 1) {
      issues.push_back({ErrorKind::invalid_argument, "policy '" + policy.tag + "' keyed on a non pre-action state"});
    } else if (row.size() != spec.agents.size()) {
      issues.push_back({ErrorKind::invalid_argument, "policy '" + policy.tag + "' row has wrong length"});
    } else if (auto problem = distribution_problem(row)) {
      issues.push_back({ErrorKind::normalization, "policy '" + policy.tag + "' at '" +
                                                      format_history(spec.users, spec.agents, pre) + "': " + *problem});
    }
  }
  SymbolSeq h;
  auto walk = [&](auto&& self) -> void {
    if (h.size() == 2 * spec.horizon) return;
    auto dyn = spec.user_dynamics.find(h);
    if (dyn == spec.user_dynamics.end()) return;  // reported by check_environment
    for (std::size_t u = 0; u < dyn->second.size(); ++u) {
      if (dyn->second[u] <= 0.0) continue;
      h.push_back(static_cast<Symbol>(u));
      auto act = policy.action_table.find(h);
      if (act == policy.action_table.end()) {
        issues.push_back({ErrorKind::missing_context, "policy '" + policy.tag + "' undefined at reachable state '" +
                                                          format_history(spec.users, spec.agents, h) + "'"});
      } else if (act->second.size() == spec.agents.size()) {
        for (std::size_t a = 0; a < act->second.size(); ++a) {
          if (act->second[a] <= 0.0) continue;
          h.push_back(static_cast<Symbol>(a));
          self(self);
          h.pop_back();
        }
      }
      h.pop_back();
    }
  };
  walk(walk);
  return issues;
}

inline const AgentPolicy& validate_policy(const EnvironmentSpec& spec, const AgentPolicy& policy) {
  raise_issues(check_policy(spec, policy), "invalid policy");
  return policy;
}

// ---------------------------------------------------------------------------
// Trajectory measure P^π

/// ∏_t P(u_t | h_{t-1}) π(a_t | h_{t-1}, u_t); 0 for unreachable trajectories.
/// Horizons above 12 accumulate in log space.
inline double trajectory_probability(const EnvironmentSpec& spec, const AgentPolicy& policy, const Trajectory& tau) {
  const auto& s = tau.symbols();
  if (s.size() % 2 != 0 || s.size() / 2 > spec.horizon)
    fail(ErrorKind::invalid_argument, "trajectory length does not match the horizon");
  const bool use_log = s.size() / 2 > 12;
  double p = 1.0;
  double log_p = 0.0;
  SymbolSeq h;
  h.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); i += 2) {
    const Symbol u = s[i];
    const Symbol a = s[i + 1];
    if (u >= spec.users.size() || a >= spec.agents.size()) fail(ErrorKind::invalid_argument, "symbol out of alphabet");
    const double pu = spec.dynamics(h)[u];
    if (pu <= 0.0) return 0.0;
    h.push_back(u);
    const double pa = policy.at(h)[a];
    if (pa <= 0.0) return 0.0;
    h.push_back(a);
    if (use_log) log_p += std::log(pu) + std::log(pa);
    else p *= pu * pa;
  }
  return use_log ? std::exp(log_p) : p;
}

struct WeightedTrajectory {
  Trajectory trajectory;
  double probability = 0.0;
};

/// Every positive-probability trajectory truncated to `up_to` steps (default: horizon).
inline std::vector<WeightedTrajectory> enumerate_trajectories(const EnvironmentSpec& spec, const AgentPolicy& policy,
                                                              std::optional<std::size_t> up_to = std::nullopt) {
  const std::size_t steps = up_to.value_or(spec.horizon);
  if (steps > spec.horizon) fail(ErrorKind::invalid_argument, "up_to exceeds the horizon");
  require_exact_budget(spec.users.size(), spec.agents.size(), steps);
  std::vector<WeightedTrajectory> out;
  walk_paths(
      steps, [&](const SymbolSeq& h) -> const Distribution& { return spec.dynamics(h); },
      [&](const SymbolSeq& pre) -> const Distribution& { return policy.at(pre); },
      [&](const SymbolSeq& tau, double p) { out.push_back({History(tau), p}); });
  return out;
}

inline Trajectory sample_trajectory(const EnvironmentSpec& spec, const AgentPolicy& policy, Rng& rng) {
  History h;
  for (std::size_t t = 0; t < spec.horizon; ++t) {
    h.push_back(static_cast<Symbol>(rng.categorical(spec.dynamics(h.symbols()))));
    h.push_back(static_cast<Symbol>(rng.categorical(policy.at(h.symbols()))));
  }
  return h;
}

inline Trajectory sample_trajectory(const EnvironmentSpec& spec, const AgentPolicy& policy, std::uint64_t seed) {
  Rng rng(seed);
  return sample_trajectory(spec, policy, rng);
}

/// Every complete history reachable under the dynamics and any agent action.
inline std::vector<Trajectory> all_trajectories(const EnvironmentSpec& spec) {
  require_exact_budget(spec.users.size(), spec.agents.size(), spec.horizon);
  const Distribution all_actions(spec.agents.size(), 1.0);
  std::vector<Trajectory> out;
  walk_paths(
      spec.horizon, [&](const SymbolSeq& h) -> const Distribution& { return spec.dynamics(h); },
      [&](const SymbolSeq&) -> const Distribution& { return all_actions; },
      [&](const SymbolSeq& tau, double) { out.emplace_back(tau); });
  return out;
}

/// Complete histories h_{t-1} (t = 1..steps) reachable under the dynamics and
/// any agent action, in depth-first order.
inline std::vector<SymbolSeq> reachable_histories(const EnvironmentSpec& spec, std::size_t steps) {
  std::vector<SymbolSeq> out;
  SymbolSeq h;
  auto walk = [&](auto&& self) -> void {
    if (h.size() == 2 * steps) return;
    out.push_back(h);
    const Distribution& row = spec.dynamics(h);
    for (std::size_t u = 0; u < row.size(); ++u) {
      if (row[u] <= 0.0) continue;
      h.push_back(static_cast<Symbol>(u));
      for (std::size_t a = 0; a < spec.agents.size(); ++a) {
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

/// Builds dynamics from `fn(h)` on every history reachable under any action.
template <class Fn>
EnvironmentSpec tabulate_environment(Alphabet users, Alphabet agents, std::size_t horizon, Fn&& fn) {
  EnvironmentSpec spec{std::move(users), std::move(agents), horizon, {}};
  History h;
  auto walk = [&](auto&& self) -> void {
    if (h.size() == 2 * horizon) return;
    Distribution row = fn(static_cast<const History&>(h));
    if (row.size() != spec.users.size()) fail(ErrorKind::invalid_argument, "dynamics row has wrong length");
    auto it = spec.user_dynamics.emplace(h.symbols(), std::move(row)).first;
    const Distribution& r = it->second;
    for (std::size_t u = 0; u < r.size(); ++u) {
      if (r[u] <= 0.0) continue;
      h.push_back(static_cast<Symbol>(u));
      for (std::size_t a = 0; a < spec.agents.size(); ++a) {
        h.push_back(static_cast<Symbol>(a));
        self(self);
        h.pop_back();
      }
      h.pop_back();
    }
  };
  walk(walk);
  return spec;
}

/// Tabulates `fn(pre_action)` on every pre-action state reachable under any action.
template <class Fn>
AgentPolicy tabulate_policy(const EnvironmentSpec& spec, std::string tag, Fn&& fn) {
  AgentPolicy out{std::move(tag), {}};
  for (const auto& h : reachable_histories(spec, spec.horizon)) {
    const Distribution& row = spec.dynamics(h);
    for (std::size_t u = 0; u < row.size(); ++u) {
      if (row[u] <= 0.0) continue;
      History pre(h);
      pre.push_back(static_cast<Symbol>(u));
      Distribution act = fn(static_cast<const History&>(pre));
      if (act.size() != spec.agents.size()) fail(ErrorKind::invalid_argument, "policy row has wrong length");
      out.action_table.emplace(pre.symbols(), std::move(act));
    }
  }
  return out;
}

/// Same environment restricted to the first `steps` steps.
inline EnvironmentSpec truncate(const EnvironmentSpec& spec, std::size_t steps) {
  if (steps == 0 || steps > spec.horizon) fail(ErrorKind::invalid_argument, "truncate: invalid step count");
  EnvironmentSpec out{spec.users, spec.agents, steps, {}};
  for (const auto& [h, row] : spec.user_dynamics)
    if (h.size() < 2 * steps) out.user_dynamics.emplace(h, row);
  return out;
}

}  // namespace ctrlsim

#endif  // CTRLSIM_ENV_CORE_HPP
