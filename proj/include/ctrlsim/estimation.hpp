#ifndef CTRLSIM_ESTIMATION_HPP
#define CTRLSIM_ESTIMATION_HPP

#include <algorithm>
#include <cstdint>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ctrlsim/env_core.hpp"
#include "ctrlsim/labeling.hpp"
#include "ctrlsim/simulators.hpp"

namespace ctrlsim {

struct LabeledTrajectory {
  Trajectory trajectory;
  Symbol label = 0;
};

struct OfflineDataset {
  Alphabet users;
  Alphabet agents;
  Alphabet controls;
  std::size_t horizon = 0;
  std::string behavior_tag;
  std::string labeler_name;
  std::uint64_t seed = 0;
  std::vector<LabeledTrajectory> records;
};

/// N i.i.d. pairs τ ~ P^{π_b}, ẑ ~ P_L(· | τ). Datasets for the same seed are
/// nested: the first n records do not depend on N.
inline OfflineDataset sample_offline_logs(const EnvironmentSpec& spec, const AgentPolicy& behavior,
                                          const PostHocLabeler& labeler, std::size_t n, std::uint64_t seed) {
  OfflineDataset d{spec.users, spec.agents, labeler.controls, spec.horizon, behavior.tag, labeler.name, seed, {}};
  d.records.reserve(n);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    Trajectory tau = sample_trajectory(spec, behavior, rng);
    const Symbol z = static_cast<Symbol>(rng.categorical(labeler.at(tau.symbols())));
    d.records.push_back({std::move(tau), z});
  }
  return d;
}

/// One record per line: comma-joined symbols, a tab, the label.
inline std::string format_dataset(const OfflineDataset& d) {
  std::string out;
  for (const auto& r : d.records) {
    out += format_history(d.users, d.agents, r.trajectory.symbols());
    out += '\t';
    out += d.controls.name(r.label);
    out += '\n';
  }
  return out;
}

inline std::vector<LabeledTrajectory> parse_dataset(std::string_view text, const Alphabet& users,
                                                    const Alphabet& agents, const Alphabet& controls) {
  std::vector<LabeledTrajectory> out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const std::size_t end = text.find('\n');
    std::string_view line = text.substr(0, end);
    text = end == std::string_view::npos ? std::string_view{} : text.substr(end + 1);
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string_view::npos)
      fail(ErrorKind::parse, "dataset line " + std::to_string(line_no) + " has no label column");
    out.push_back({parse_history(users, agents, line.substr(0, tab)), controls.index(line.substr(tab + 1))});
  }
  return out;
}

/// Count table of user symbols per (ẑ, h_{t-1}) with additive smoothing α.
class FittedKernel {
 public:
  FittedKernel(std::size_t users, std::size_t controls, double alpha)
      : users_(users), controls_(controls), alpha_(alpha) {
    if (!(alpha >= 0.0)) fail(ErrorKind::invalid_argument, "smoothing parameter must be non-negative");
  }

  void observe(Symbol z, const SymbolSeq& h, Symbol u) {
    SymbolSeq key{z};
    key.insert(key.end(), h.begin(), h.end());
    auto& c = counts_[key];
    if (c.empty()) c.assign(users_, 0.0);
    c.at(u) += 1.0;
  }

  double alpha() const noexcept { return alpha_; }
  std::size_t users() const noexcept { return users_; }
  std::size_t controls() const noexcept { return controls_; }

  bool seen(Symbol z, const SymbolSeq& h) const { return counts_.contains(key(z, h)); }

  /// (count + α) / (Σ counts + α|U|)
  Distribution row(Symbol z, const SymbolSeq& h) const {
    auto it = counts_.find(key(z, h));
    if (it == counts_.end()) {
      if (alpha_ <= 0.0) fail(ErrorKind::unseen_context, "no observations for this (control, history) and alpha = 0");
      return uniform_distribution(users_);
    }
    const double denom = total(it->second) + alpha_ * static_cast<double>(users_);
    Distribution out(users_);
    for (std::size_t u = 0; u < users_; ++u) out[u] = (it->second[u] + alpha_) / denom;
    return out;
  }

  const SeqMap<Distribution>& counts() const noexcept { return counts_; }

 private:
  static SymbolSeq key(Symbol z, const SymbolSeq& h) {
    SymbolSeq k{z};
    k.insert(k.end(), h.begin(), h.end());
    return k;
  }

  std::size_t users_;
  std::size_t controls_;
  double alpha_;
  SeqMap<Distribution> counts_;
};

inline FittedKernel fit_conditional_kernel(const OfflineDataset& dataset, double alpha = 1.0) {
  FittedKernel k(dataset.users.size(), dataset.controls.size(), alpha);
  for (const auto& r : dataset.records) {
    const auto& s = r.trajectory.symbols();
    for (std::size_t i = 0; i < s.size(); i += 2) k.observe(r.label, SymbolSeq(s.begin(), s.begin() + i), s[i]);
  }
  return k;
}

/// Σ over (h, ẑ) of weighting mass × TV(fitted, exact), divided by the
/// number of steps so the value lies in [0, 1].
inline double tv_distance(const FittedKernel& fitted, const SimulatorKernel& exact, const ComposedMeasure& weighting) {
  if (!exact.has_global_control()) fail(ErrorKind::invalid_argument, "fitted kernels need a global control");
  double sum = 0.0;
  weighting.visit_states([&](std::optional<Symbol> z, const SymbolSeq&, const SymbolSeq& h, double mass) {
    const Control ctl = weighting.control_for(z);
    sum += mass * total_variation(fitted.row(*z, h), exact.emission(ctl, h));
  });
  return sum / static_cast<double>(weighting.steps());
}

/// Type-7 sample quantile.
inline double quantile(std::vector<double> xs, double p) {
  if (xs.empty()) fail(ErrorKind::invalid_argument, "quantile of an empty sample");
  std::sort(xs.begin(), xs.end());
  const double pos = p * static_cast<double>(xs.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

struct ConvergenceRow {
  std::size_t samples = 0;
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double iqr() const { return q3 - q1; }
  std::vector<double> values;  // per seed, in seed order
};

/// TV of the fitted kernel to the exact trajectory-conditioned kernel for
/// every N and seed, aggregated per N.
inline std::vector<ConvergenceRow> convergence_curve(const EnvironmentSpec& spec, const AgentPolicy& behavior,
                                                     const PostHocLabeler& labeler, const std::vector<std::size_t>& ns,
                                                     const std::vector<std::uint64_t>& seeds, double alpha = 1.0) {
  for (std::size_t i = 1; i < ns.size(); ++i)
    if (ns[i] <= ns[i - 1]) fail(ErrorKind::invalid_argument, "sample sizes must be strictly increasing");
  if (!(alpha >= 0.0)) fail(ErrorKind::invalid_argument, "smoothing parameter must be non-negative");
  std::vector<ConvergenceRow> rows;
  if (ns.empty() || seeds.empty()) return rows;
  const SimulatorKernel exact = trajectory_conditioned_kernel(spec, behavior, labeler);
  const ComposedMeasure weighting = compose(exact, behavior, Control::mixture());
  for (std::size_t n : ns) rows.push_back({n, 0.0, 0.0, 0.0, {}});
  for (std::uint64_t seed : seeds) {
    const OfflineDataset all = sample_offline_logs(spec, behavior, labeler, ns.back(), seed);
    FittedKernel fitted(spec.users.size(), labeler.controls.size(), alpha);
    std::size_t used = 0;
    for (std::size_t i = 0; i < ns.size(); ++i) {
      for (; used < ns[i]; ++used) {
        const auto& r = all.records[used];
        const auto& s = r.trajectory.symbols();
        for (std::size_t k = 0; k < s.size(); k += 2) fitted.observe(r.label, SymbolSeq(s.begin(), s.begin() + k), s[k]);
      }
      rows[i].values.push_back(tv_distance(fitted, exact, weighting));
    }
  }
  for (auto& r : rows) {
    r.median = quantile(r.values, 0.5);
    r.q1 = quantile(r.values, 0.25);
    r.q3 = quantile(r.values, 0.75);
  }
  return rows;
}

}  // namespace ctrlsim

#endif  // CTRLSIM_ESTIMATION_HPP
