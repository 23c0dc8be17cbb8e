#ifndef CTRLSIM_PATH_MEASURE_HPP
#define CTRLSIM_PATH_MEASURE_HPP

#include <optional>
#include <span>

#include "ctrlsim/env_core.hpp"

namespace ctrlsim {

/// How control annotations are interleaved with the trajectory in a path key:
/// [global control] then, per step, [z_t] u_t a_t.
struct PathLayout {
  bool global_control = false;
  bool step_controls = false;

  friend bool operator==(const PathLayout&, const PathLayout&) = default;
};

struct AnnotatedPath {
  std::optional<Symbol> control;
  SymbolSeq step_controls;  // z_1..z_T, empty unless step-wise controls are generated
  Trajectory trajectory;

  friend bool operator==(const AnnotatedPath&, const AnnotatedPath&) = default;
};

/// Key of the annotated prefix (control, z_1..z_k, history). `step_controls`
/// may be one longer than the number of started steps in `history`; the extra
/// z_t then ends the key (the state just before u_t is drawn).
inline SymbolSeq encode_path_key(const PathLayout& layout, std::optional<Symbol> control,
                                 std::span<const Symbol> step_controls, std::span<const Symbol> history) {
  SymbolSeq key;
  key.reserve(history.size() + step_controls.size() + 1);
  if (layout.global_control) {
    if (!control) fail(ErrorKind::invalid_argument, "path key requires a global control");
    key.push_back(*control);
  }
  for (std::size_t k = 0;; ++k) {
    if (layout.step_controls && k < step_controls.size()) key.push_back(step_controls[k]);
    if (2 * k >= history.size()) break;
    key.push_back(history[2 * k]);
    if (2 * k + 1 >= history.size()) break;
    key.push_back(history[2 * k + 1]);
  }
  return key;
}

inline SymbolSeq encode_path_key(const PathLayout& layout, const AnnotatedPath& path) {
  return encode_path_key(layout, path.control, path.step_controls, path.trajectory.symbols());
}

/// Exact measure over annotated paths, stored as masses of every key prefix so
/// that any sequential conditional is a ratio of two lookups.
class PathMeasure {
 public:
  PathMeasure() = default;
  PathMeasure(PathLayout layout, std::size_t steps) : layout_(layout), steps_(steps) {}

  void add(const SymbolSeq& key, double mass) {
    if (mass <= 0.0) return;
    SymbolSeq prefix;
    prefix.reserve(key.size());
    prefix_mass_[prefix] += mass;
    for (Symbol s : key) {
      prefix.push_back(s);
      prefix_mass_[prefix] += mass;
    }
  }

  void add(const AnnotatedPath& path, double mass) { add(encode_path_key(layout_, path), mass); }

  double mass(const SymbolSeq& key) const {
    auto it = prefix_mass_.find(key);
    return it == prefix_mass_.end() ? 0.0 : it->second;
  }

  double total() const { return mass({}); }

  /// P(next | prefix)
  double conditional(const SymbolSeq& prefix, Symbol next) const {
    const double denom = mass(prefix);
    if (!(denom > 0.0)) fail(ErrorKind::undefined_conditional, "conditioning on a zero-mass prefix");
    SymbolSeq key = prefix;
    key.push_back(next);
    return mass(key) / denom;
  }

  PathLayout layout() const noexcept { return layout_; }
  std::size_t steps() const noexcept { return steps_; }

 private:
  PathLayout layout_{};
  std::size_t steps_ = 0;
  SeqMap<double> prefix_mass_;
};

/// P^π over trajectories (no annotations).
inline PathMeasure true_measure(const EnvironmentSpec& spec, const AgentPolicy& policy,
                                std::optional<std::size_t> steps = std::nullopt) {
  PathMeasure m(PathLayout{}, steps.value_or(spec.horizon));
  for (const auto& wt : enumerate_trajectories(spec, policy, steps)) m.add(wt.trajectory.symbols(), wt.probability);
  return m;
}

}  // namespace ctrlsim

#endif  // CTRLSIM_PATH_MEASURE_HPP
