#ifndef CTRLSIM_ANALYSIS_HPP
#define CTRLSIM_ANALYSIS_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "ctrlsim/beliefs.hpp"
#include "ctrlsim/env_core.hpp"
#include "ctrlsim/labeling.hpp"
#include "ctrlsim/path_measure.hpp"
#include "ctrlsim/simulators.hpp"

namespace ctrlsim {

// Ratio orientation: ρ_t and W are true over simulated, P^{π_e} / P_sim.
// Theorem-1 reports use the reciprocal P_sim / P^π and say so in field names.

/// State at which ρ_t is evaluated: before u_t is drawn.
struct StepContext {
  std::optional<Symbol> control;
  std::string_view policy_tag;
  std::span<const Symbol> step_controls;  // z_1 .. z_{t-1}
  std::span<const Symbol> history;        // h_{t-1}
};

/// Step-wise user generative error ρ_t for one kernel paradigm. Both the
/// true and the simulated conditionals come from exact sources that do not
/// read the kernel's stored rows, so a corrupted row shows up in E[ρ_t].
class RatioModel {
 public:
  virtual ~RatioModel() = default;
  virtual const std::string& evaluation_tag() const = 0;
  /// ρ_t for emission entry `entry` (a user index, or z·|U| + u for step controls).
  virtual double rho(const StepContext& ctx, std::size_t entry) const = 0;
};

/// ρ_t = M_t^{π_e}(u) / M_t^{π_gen}(u) for kernels fitted to post-hoc labels,
/// where π_gen is π_b or, for policy-conditioned kernels, the tagged policy.
class PosthocRatio final : public RatioModel {
 public:
  PosthocRatio(const EnvironmentSpec& spec, const PostHocLabeler& labeler, std::vector<AgentPolicy> generating,
               AgentPolicy evaluation)
      : engine_(spec, labeler), generating_(std::move(generating)), evaluation_(std::move(evaluation)) {
    if (generating_.empty()) fail(ErrorKind::invalid_argument, "no generating policy");
  }

  const std::string& evaluation_tag() const override { return evaluation_.tag; }

  double rho(const StepContext& ctx, std::size_t entry) const override {
    if (!ctx.control) fail(ErrorKind::invalid_argument, "post-hoc ratios need a control value");
    const Symbol z = *ctx.control;
    const SymbolSeq h(ctx.history.begin(), ctx.history.end());
    const double me = update(evaluation_, h, static_cast<Symbol>(entry), z);
    const double mg = update(generator(ctx.policy_tag), h, static_cast<Symbol>(entry), z);
    if (!(mg > 0.0)) fail(ErrorKind::support_violation, "simulated belief update is zero where the kernel has mass");
    return me / mg;
  }

  const BeliefEngine& engine() const noexcept { return engine_; }

 private:
  const AgentPolicy& generator(std::string_view tag) const {
    if (tag.empty()) return generating_.front();
    for (const auto& p : generating_)
      if (p.tag == tag) return p;
    fail(ErrorKind::unknown_policy, "no generating policy tagged '" + std::string(tag) + "'");
  }

  double update(const AgentPolicy& policy, const SymbolSeq& h, Symbol u, Symbol z) const {
    return engine_.belief_update(policy, History(h), u, z);
  }

  BeliefEngine engine_;
  std::vector<AgentPolicy> generating_;
  AgentPolicy evaluation_;
};

/// P^{π_e}(u | h, z) from the a-priori joint measure over the stored dynamics.
class AprioriRatio final : public RatioModel {
 public:
  AprioriRatio(AprioriControl control, AgentPolicy evaluation, std::optional<std::size_t> steps = std::nullopt)
      : control_(std::move(control)),
        evaluation_(std::move(evaluation)),
        truth_(apriori_measure(control_, evaluation_, steps)) {}

  const std::string& evaluation_tag() const override { return evaluation_.tag; }

  double rho(const StepContext& ctx, std::size_t entry) const override {
    if (!ctx.control) fail(ErrorKind::invalid_argument, "a-priori ratios need a control value");
    SymbolSeq key{*ctx.control};
    key.insert(key.end(), ctx.history.begin(), ctx.history.end());
    const double truth = truth_.conditional(key, static_cast<Symbol>(entry));
    const double sim = control_.environment(*ctx.control).dynamics({ctx.history.begin(), ctx.history.end()})[entry];
    if (!(sim > 0.0)) fail(ErrorKind::support_violation, "control dynamics assign zero to an emitted user symbol");
    return truth / sim;
  }

 private:
  AprioriControl control_;
  AgentPolicy evaluation_;
  PathMeasure truth_;
};

/// Joint (z_t, u_t) ratio for step-wise controls: truth from the step-wise
/// measure under π_e, simulation from P(u | h) P_L(z_t | h, u).
class DynamicRatio final : public RatioModel {
 public:
  DynamicRatio(EnvironmentSpec spec, StepwiseLabeler stepwise, AgentPolicy evaluation,
               std::optional<std::size_t> steps = std::nullopt)
      : spec_(std::move(spec)),
        stepwise_(std::move(stepwise)),
        evaluation_(std::move(evaluation)),
        truth_(stepwise_measure(spec_, evaluation_, stepwise_, steps)) {}

  const std::string& evaluation_tag() const override { return evaluation_.tag; }

  double rho(const StepContext& ctx, std::size_t entry) const override {
    const std::size_t nu = spec_.users.size();
    const Symbol z = static_cast<Symbol>(entry / nu);
    const Symbol u = static_cast<Symbol>(entry % nu);
    const PathLayout layout{.global_control = false, .step_controls = true};
    SymbolSeq key = encode_path_key(layout, std::nullopt, ctx.step_controls, ctx.history);
    const double before = truth_.mass(key);
    if (!(before > 0.0)) fail(ErrorKind::undefined_conditional, "simulated history left the true support");
    key.push_back(z);
    key.push_back(u);
    const double truth = truth_.mass(key) / before;
    SymbolSeq h(ctx.history.begin(), ctx.history.end());
    const double pu = spec_.dynamics(h)[u];
    h.push_back(u);
    const double sim = pu * stepwise_.at(h)[z];
    if (!(sim > 0.0)) fail(ErrorKind::support_violation, "step-wise joint is zero at an emitted entry");
    return truth / sim;
  }

 private:
  EnvironmentSpec spec_;
  StepwiseLabeler stepwise_;
  AgentPolicy evaluation_;
  PathMeasure truth_;
};

/// Parameterized user: truth by path sum over latent paths under π_e,
/// simulation by the policy-free forward filter.
class ParameterizedRatio final : public RatioModel {
 public:
  ParameterizedRatio(ParameterizedDynamics pd, AgentPolicy evaluation, std::optional<std::size_t> steps = std::nullopt)
      : pd_(std::move(pd)), evaluation_(std::move(evaluation)) {
    for (Symbol z0 = 0; z0 < pd_.latent.size(); ++z0)
      for (Symbol c = 0; c < pd_.profiles.size(); ++c)
        truth_.push_back(parameterized_measure(pd_, evaluation_, z0, c, steps));
  }

  const std::string& evaluation_tag() const override { return evaluation_.tag; }

  double rho(const StepContext& ctx, std::size_t entry) const override {
    if (!ctx.control) fail(ErrorKind::invalid_argument, "parameterized ratios need a control value");
    const Symbol idx = *ctx.control;
    const Symbol nc = static_cast<Symbol>(pd_.profiles.size());
    SymbolSeq key{idx};
    key.insert(key.end(), ctx.history.begin(), ctx.history.end());
    const double truth = truth_.at(idx).conditional(key, static_cast<Symbol>(entry));
    const double sim = parameterized_predictive(pd_, idx / nc, idx % nc, {ctx.history.begin(), ctx.history.end()})[entry];
    if (!(sim > 0.0)) fail(ErrorKind::support_violation, "filtered predictive is zero at an emitted user symbol");
    return truth / sim;
  }

 private:
  ParameterizedDynamics pd_;
  AgentPolicy evaluation_;
  std::vector<PathMeasure> truth_;
};

// ---------------------------------------------------------------------------
// Weight process

struct DensityRatioProcess {
  std::vector<double> rho;         // ρ_1 .. ρ_T
  std::vector<double> cumulative;  // W_1^{(u)} .. W_T^{(u)}
  double weight() const { return cumulative.empty() ? 1.0 : cumulative.back(); }
};

namespace detail {

inline StepContext context_for(const ComposedMeasure& m, const AnnotatedPath& path, std::size_t steps_done,
                               const SymbolSeq& symbols) {
  return StepContext{path.control, m.control().policy_tag,
                     std::span<const Symbol>(path.step_controls.data(), std::min(steps_done, path.step_controls.size())),
                     std::span<const Symbol>(symbols.data(), 2 * steps_done)};
}

}  // namespace detail

/// ρ_t and W_t^{(u)} along one annotated path of the composed measure.
inline DensityRatioProcess weight_process(const ComposedMeasure& measure, const RatioModel& model,
                                          const AnnotatedPath& path) {
  const auto& s = path.trajectory.symbols();
  const std::size_t nu = measure.kernel().users.size();
  DensityRatioProcess out;
  double log_w = 0.0;
  for (std::size_t t = 0; 2 * t < s.size(); ++t) {
    std::size_t entry = s[2 * t];
    if (measure.kernel().has_step_controls()) entry += path.step_controls.at(t) * nu;
    const double r = model.rho(detail::context_for(measure, path, t, s), entry);
    out.rho.push_back(r);
    log_w += std::log(r);
    out.cumulative.push_back(std::exp(log_w));
  }
  return out;
}

/// Every exact quantity from one pass over the composed measure. Expectations
/// use the kernel's stored rows; ρ_t uses the ratio model.
struct WeightDiagnostics {
  std::size_t steps = 0;
  double total_mass = 0.0;
  double mean = 0.0;           // E[W_T]
  double second_moment = 0.0;  // E[W_T²]
  double variance = 0.0;       // direct Var(W_T)
  std::vector<double> contributions;         // E[W_{t-1}² V_t]
  double decomposition = 0.0;                // Σ_t contributions
  std::vector<double> martingale_deviation;  // max |E[W_t | h_{t-1}] − W_{t-1}|
  double tower_deviation = 0.0;              // max |E[ρ_t] − 1|
  double min_sensitivity = std::numeric_limits<double>::infinity();  // certified η
  double max_sensitivity = 0.0;
  double max_rho_deviation = 0.0;  // max |ρ_t − 1|
  std::size_t states = 0;
};

inline WeightDiagnostics weight_diagnostics(const ComposedMeasure& measure, const RatioModel& model) {
  if (measure.policy().tag != model.evaluation_tag())
    fail(ErrorKind::invalid_argument, "composed policy '" + measure.policy().tag + "' differs from the ratio model's '" +
                                          model.evaluation_tag() + "'");
  const SimulatorKernel& kernel = measure.kernel();
  const AgentPolicy& policy = measure.policy();
  const std::size_t T = measure.steps();
  const std::size_t nu = kernel.users.size();

  WeightDiagnostics d;
  d.steps = T;
  d.contributions.assign(T, 0.0);
  d.martingale_deviation.assign(T, 0.0);

  for (const auto& [value, weight] : measure.initial_controls()) {
    const Control ctl = measure.control_for(value);
    SymbolSeq h;
    SymbolSeq zs;
    auto walk = [&](auto&& self, double mass, double log_w) -> void {
      const std::size_t t = h.size() / 2;
      if (t == T) {
        const double w = std::exp(log_w);
        d.total_mass += mass;
        d.mean += mass * w;
        d.second_moment += mass * w * w;
        return;
      }
      const Distribution& row = kernel.emission(ctl, h);
      const StepContext ctx{value, ctl.policy_tag, zs, h};
      std::vector<double> rho(row.size(), 0.0);
      double e_rho = 0.0;
      for (std::size_t i = 0; i < row.size(); ++i) {
        if (row[i] <= 0.0) continue;
        rho[i] = model.rho(ctx, i);
        e_rho += row[i] * rho[i];
        d.max_rho_deviation = std::max(d.max_rho_deviation, std::abs(rho[i] - 1.0));
      }
      double v = 0.0;
      for (std::size_t i = 0; i < row.size(); ++i)
        if (row[i] > 0.0) v += row[i] * (rho[i] - e_rho) * (rho[i] - e_rho);
      const double w_prev = std::exp(log_w);
      ++d.states;
      d.contributions[t] += mass * w_prev * w_prev * v;
      d.martingale_deviation[t] = std::max(d.martingale_deviation[t], std::abs(w_prev * (e_rho - 1.0)));
      d.tower_deviation = std::max(d.tower_deviation, std::abs(e_rho - 1.0));
      d.min_sensitivity = std::min(d.min_sensitivity, v);
      d.max_sensitivity = std::max(d.max_sensitivity, v);

      for (std::size_t i = 0; i < row.size(); ++i) {
        if (row[i] <= 0.0) continue;
        const double next_log = log_w + std::log(rho[i]);
        if (kernel.has_step_controls()) zs.push_back(static_cast<Symbol>(i / nu));
        h.push_back(static_cast<Symbol>(i % nu));
        const Distribution& act = policy.at(h);
        for (Symbol a = 0; a < act.size(); ++a) {
          if (act[a] <= 0.0) continue;
          h.push_back(a);
          self(self, mass * row[i] * act[a], next_log);
          h.pop_back();
        }
        h.pop_back();
        if (kernel.has_step_controls()) zs.pop_back();
      }
    };
    walk(walk, weight, 0.0);
  }
  d.variance = d.second_moment - d.mean * d.mean;
  for (double c : d.contributions) d.decomposition += c;
  return d;
}

// ---------------------------------------------------------------------------
// Spec-level diagnostics

/// ρ_t = M_t^{π_e}(u_t) / M_t^{π_b}(u_t) at (h_{t-1}, u_t, ẑ).
inline double user_generative_error(const EnvironmentSpec& spec, const AgentPolicy& behavior,
                                    const AgentPolicy& evaluation, const PostHocLabeler& labeler,
                                    const SimulatorKernel& kernel, const History& h, Symbol u, Symbol z) {
  const Control ctl = Control::fixed(z, kernel.kind == KernelKind::policy_conditioned ? behavior.tag : "");
  if (!(kernel.emission(ctl, h.symbols()).at(u) > 0.0))
    fail(ErrorKind::support_violation, "kernel assigns zero probability to the user symbol");
  const double me = belief_update(spec, evaluation, labeler, h, u, z);
  const double mb = belief_update(spec, behavior, labeler, h, u, z);
  if (!(mb > 0.0)) fail(ErrorKind::support_violation, "behavior belief update is zero");
  return me / mb;
}

struct Sensitivity {
  double variance = 0.0;  // V_t
  double mean = 0.0;      // E[ρ_t], 1 on a sound kernel
};

/// V_t = Var_{u ~ P_sim(· | h, ẑ)}(ρ_t).
inline Sensitivity local_label_sensitivity(const EnvironmentSpec& spec, const AgentPolicy& behavior,
                                           const AgentPolicy& evaluation, const PostHocLabeler& labeler,
                                           const SimulatorKernel& kernel, const History& h, Symbol z) {
  const Control ctl = Control::fixed(z, kernel.kind == KernelKind::policy_conditioned ? behavior.tag : "");
  const Distribution& row = kernel.emission(ctl, h.symbols());
  std::vector<double> rho(row.size(), 0.0);
  Sensitivity s;
  for (Symbol u = 0; u < row.size(); ++u) {
    if (row[u] <= 0.0) continue;
    rho[u] = user_generative_error(spec, behavior, evaluation, labeler, kernel, h, u, z);
    s.mean += row[u] * rho[u];
  }
  for (Symbol u = 0; u < row.size(); ++u)
    if (row[u] > 0.0) s.variance += row[u] * (rho[u] - s.mean) * (rho[u] - s.mean);
  return s;
}

inline double geometric_lower_bound(double eta, std::size_t T) {
  if (!(eta >= 0.0) || T < 1) fail(ErrorKind::invalid_argument, "bound needs eta >= 0 and T >= 1");
  return std::pow(1.0 + eta, static_cast<double>(T)) - 1.0;
}

/// Least-squares slope s of ln(1 + Var_T) on T; returns exp(s) − 1.
inline double estimate_eta_hat(std::span<const std::size_t> horizons, std::span<const double> variances) {
  if (horizons.size() != variances.size()) fail(ErrorKind::invalid_argument, "horizon and variance counts differ");
  if (variances.size() < 2) fail(ErrorKind::degenerate_fit, "need at least two points to fit a growth rate");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < variances.size(); ++i) {
    if (!(variances[i] > -1.0)) fail(ErrorKind::invalid_argument, "variance entries must exceed -1");
    mx += static_cast<double>(horizons[i]);
    my += std::log1p(variances[i]);
  }
  const double n = static_cast<double>(variances.size());
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < variances.size(); ++i) {
    const double dx = static_cast<double>(horizons[i]) - mx;
    sxy += dx * (std::log1p(variances[i]) - my);
    sxx += dx * dx;
  }
  if (!(sxx > 0.0)) fail(ErrorKind::degenerate_fit, "horizons must not all be equal");
  return std::expm1(sxy / sxx);
}

/// Variances indexed T = 1, 2, ...
inline double estimate_eta_hat(std::span<const double> variances) {
  std::vector<std::size_t> horizons(variances.size());
  for (std::size_t i = 0; i < horizons.size(); ++i) horizons[i] = i + 1;
  return estimate_eta_hat(horizons, variances);
}

struct VarianceReport {
  std::size_t steps = 0;
  double direct = 0.0;
  double decomposition = 0.0;
  std::vector<double> contributions;
  double eta = 0.0;  // certified floor, or the override
  bool eta_certified = true;
  double bound = 0.0;  // (1+η)^T − 1
  double martingale_deviation = 0.0;

  /// Var ≥ bound, up to rounding relative to the bound's size.
  bool meets_bound() const { return direct >= bound - 1e-12 * std::max(1.0, bound); }
};

inline VarianceReport variance_decomposition(const ComposedMeasure& measure, const RatioModel& model,
                                             std::optional<double> eta = std::nullopt) {
  const WeightDiagnostics d = weight_diagnostics(measure, model);
  VarianceReport r;
  r.steps = d.steps;
  r.direct = d.variance;
  r.decomposition = d.decomposition;
  r.contributions = d.contributions;
  r.eta_certified = !eta.has_value();
  r.eta = eta.value_or(std::isfinite(d.min_sensitivity) ? std::max(0.0, d.min_sensitivity) : 0.0);
  r.bound = geometric_lower_bound(r.eta, d.steps);
  for (double m : d.martingale_deviation) r.martingale_deviation = std::max(r.martingale_deviation, m);
  return r;
}

/// Post-hoc kernels: composes `kernel` with π_e at ẑ over T steps and compares
/// the direct variance of W_T^{(u)} with its decomposition.
inline VarianceReport variance_decomposition(const EnvironmentSpec& spec, const AgentPolicy& behavior,
                                             const AgentPolicy& evaluation, const PostHocLabeler& labeler,
                                             const SimulatorKernel& kernel, Symbol z, std::size_t T,
                                             std::optional<double> eta = std::nullopt) {
  const bool tagged = kernel.kind == KernelKind::policy_conditioned;
  const ComposedMeasure m = compose(kernel, evaluation, Control::fixed(z, tagged ? behavior.tag : ""), T);
  const PosthocRatio model(spec, labeler, {behavior}, evaluation);
  return variance_decomposition(m, model, eta);
}

/// max over reachable h_{t-1} of |E[W_t | h_{t-1}] − W_{t-1}| at step t (1-based).
inline double verify_martingale(const ComposedMeasure& measure, const RatioModel& model, std::size_t t) {
  if (t < 1 || t > measure.steps()) fail(ErrorKind::invalid_argument, "step outside the composed horizon");
  return weight_diagnostics(measure, model).martingale_deviation[t - 1];
}

struct FactorBreakdown {
  double weight = 1.0;          // direct quotient true / sim
  double control_factor = 1.0;  // ratio of control priors, when both measures carry one
  std::vector<double> user_factors;
  std::vector<double> agent_factors;

  double product() const {
    double p = control_factor;
    for (double f : user_factors) p *= f;
    for (double f : agent_factors) p *= f;
    return p;
  }
};

/// W_T = P_true(τ) / P_sim(τ) with its per-step user and agent factors. Each
/// measure reads the path through its own layout.
inline FactorBreakdown trajectory_density_ratio(const PathMeasure& truth, const PathMeasure& sim,
                                                const AnnotatedPath& path) {
  const SymbolSeq kt = encode_path_key(truth.layout(), path);
  const SymbolSeq ks = encode_path_key(sim.layout(), path);
  if (!(sim.mass(ks) > 0.0)) fail(ErrorKind::support_violation, "simulated measure assigns zero to the trajectory");
  FactorBreakdown out;
  out.weight = truth.mass(kt) / sim.mass(ks);

  std::size_t it = 0, is = 0;
  auto factor = [&](std::size_t nt, std::size_t ns) {
    SymbolSeq pt(kt.begin(), kt.begin() + static_cast<std::ptrdiff_t>(it));
    SymbolSeq ps(ks.begin(), ks.begin() + static_cast<std::ptrdiff_t>(is));
    const double before_t = truth.mass(pt), before_s = sim.mass(ps);
    it += nt;
    is += ns;
    const double after_t = truth.mass(SymbolSeq(kt.begin(), kt.begin() + static_cast<std::ptrdiff_t>(it)));
    const double after_s = sim.mass(SymbolSeq(ks.begin(), ks.begin() + static_cast<std::ptrdiff_t>(is)));
    const double num = before_t > 0.0 ? after_t / before_t : 0.0;
    return num / (after_s / before_s);
  };
  const PathLayout lt = truth.layout(), ls = sim.layout();
  if (lt.global_control || ls.global_control) out.control_factor = factor(lt.global_control, ls.global_control);
  const std::size_t T = path.trajectory.size() / 2;
  for (std::size_t t = 0; t < T; ++t) {
    out.user_factors.push_back(factor(1 + lt.step_controls, 1 + ls.step_controls));
    out.agent_factors.push_back(factor(1, 1));
  }
  return out;
}

struct BiasReport {
  Trajectory trajectory;
  double sim_over_true = 0.0;  // LHS  P_sim^π(τ) / P^π(τ)
  double rhs = 0.0;            // E_{ẑ ~ P_L(·|τ)} ∏_t P^{π_b}(ẑ | h, u) / P^{π_b}(ẑ | h, u, a)
  double true_over_sim = 0.0;  // reciprocal orientation
  double difference = 0.0;     // |LHS − RHS|
  Distribution label;          // P_L(· | τ)
  std::vector<std::vector<double>> step_factors;  // [ẑ][t]
};

/// Evaluates both sides of the look-ahead bias identity on one trajectory.
/// `simulated` is the trajectory-conditioned kernel under π_b mixed over its prior.
inline BiasReport verify_lookahead_bias(const EnvironmentSpec& spec, const AgentPolicy& policy, const BeliefTable& behavior,
                                  const PostHocLabeler& labeler, const ComposedMeasure& simulated,
                                  const Trajectory& tau) {
  const double p_true = trajectory_probability(spec, policy, tau);
  if (!(p_true > 0.0)) fail(ErrorKind::undefined_conditional, "trajectory has zero probability under the policy");
  BiasReport r;
  r.trajectory = tau;
  r.sim_over_true = simulated.trajectory_probability(tau) / p_true;
  r.label = labeler.at(tau.symbols());
  r.step_factors.assign(r.label.size(), {});
  const std::size_t T = tau.size() / 2;
  for (Symbol z = 0; z < r.label.size(); ++z) {
    double prod = 1.0;
    for (std::size_t t = 1; t <= T; ++t) {
      const double f = behavior.posterior(tau.pre_action(t).symbols(), z) / behavior.posterior(tau.prefix(2 * t).symbols(), z);
      r.step_factors[z].push_back(f);
      prod *= f;
    }
    if (r.label[z] > 0.0) r.rhs += r.label[z] * prod;
  }
  r.true_over_sim = 1.0 / r.sim_over_true;
  r.difference = std::abs(r.sim_over_true - r.rhs);
  return r;
}

inline BiasReport verify_lookahead_bias(const EnvironmentSpec& spec, const AgentPolicy& policy, const AgentPolicy& behavior,
                                  const PostHocLabeler& labeler, const Trajectory& tau) {
  const SimulatorKernel kernel = trajectory_conditioned_kernel(spec, behavior, labeler);
  const ComposedMeasure sim = compose(kernel, policy, Control::mixture());
  return verify_lookahead_bias(spec, policy, BeliefTable(spec, behavior, labeler), labeler, sim, tau);
}

/// Largest |LHS − RHS| over every trajectory on the support of both π and π_b.
inline double max_lookahead_gap(const EnvironmentSpec& spec, const AgentPolicy& policy, const AgentPolicy& behavior,
                               const PostHocLabeler& labeler) {
  const SimulatorKernel kernel = trajectory_conditioned_kernel(spec, behavior, labeler);
  const ComposedMeasure sim = compose(kernel, policy, Control::mixture());
  const BeliefTable table(spec, behavior, labeler);
  double gap = 0.0;
  for (const auto& wt : enumerate_trajectories(spec, policy)) {
    if (!(trajectory_probability(spec, behavior, wt.trajectory) > 0.0)) continue;
    gap = std::max(gap, verify_lookahead_bias(spec, policy, table, labeler, sim, wt.trajectory).difference);
  }
  return gap;
}

struct InvarianceReport {
  double max_rho_deviation = 0.0;     // max |P^{π_e}(u | h, z_0, c) / P^{π_b}(u | h, z_0, c) − 1|
  double max_kernel_deviation = 0.0;  // max |kernel row − path-sum conditional|
  std::size_t states = 0;
};

/// Checks ρ_t ≡ 1 for the parameterized user on every state reachable under
/// both policies of each pair, for every (z_0, c).
inline InvarianceReport verify_policy_invariance(const ParameterizedDynamics& pd,
                                      const std::vector<std::pair<AgentPolicy, AgentPolicy>>& pairs,
                                      std::optional<std::size_t> steps = std::nullopt) {
  const std::size_t T = steps.value_or(pd.horizon);
  const SimulatorKernel kernel = parameterized_dynamics_kernel(pd);
  InvarianceReport r;
  for (const auto& [behavior, evaluation] : pairs) {
    for (Symbol z0 = 0; z0 < pd.latent.size(); ++z0) {
      for (Symbol c = 0; c < pd.profiles.size(); ++c) {
        const Symbol idx = pd.control_index(z0, c);
        const PathMeasure mb = parameterized_measure(pd, behavior, z0, c, T);
        const PathMeasure me = parameterized_measure(pd, evaluation, z0, c, T);
        SymbolSeq key{idx};
        auto walk = [&](auto&& self) -> void {
          if (key.size() == 1 + 2 * T) return;
          const double rb = mb.mass(key), re = me.mass(key);
          if (!(rb > 0.0) || !(re > 0.0)) return;
          ++r.states;
          const Distribution& row = kernel.emission(Control::fixed(idx), SymbolSeq(key.begin() + 1, key.end()));
          for (Symbol u = 0; u < pd.users.size(); ++u) {
            const double pb = mb.conditional(key, u), pe = me.conditional(key, u);
            r.max_kernel_deviation = std::max({r.max_kernel_deviation, std::abs(row[u] - pb), std::abs(row[u] - pe)});
            if (pb <= 0.0 && pe <= 0.0) continue;
            r.max_rho_deviation = std::max(r.max_rho_deviation,
                                           pb > 0.0 ? std::abs(pe / pb - 1.0) : std::numeric_limits<double>::infinity());
            key.push_back(u);
            for (Symbol a = 0; a < pd.agents.size(); ++a) {
              key.push_back(a);
              self(self);
              key.pop_back();
            }
            key.pop_back();
          }
        };
        walk(walk);
      }
    }
  }
  return r;
}

/// Variance of an additive trajectory feature Σ_t f(h_{t-1}, u_t, a_t) under the composed measure.
inline double feature_variance(const ComposedMeasure& measure,
                               const std::function<double(const SymbolSeq& h, Symbol u, Symbol a)>& feature) {
  double m1 = 0.0, m2 = 0.0;
  measure.walk([&](std::optional<Symbol>, const SymbolSeq&, const SymbolSeq& tau, double mass) {
    double f = 0.0;
    for (std::size_t i = 0; i < tau.size(); i += 2)
      f += feature(SymbolSeq(tau.begin(), tau.begin() + static_cast<std::ptrdiff_t>(i)), tau[i], tau[i + 1]);
    m1 += mass * f;
    m2 += mass * f * f;
  });
  return m2 - m1 * m1;
}

// ---------------------------------------------------------------------------
// Monte Carlo

struct MonteCarloEstimate {
  std::size_t samples = 0;
  double mean = 0.0;
  double variance = 0.0;  // unbiased sample variance of W_T
  double standard_error = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double kurtosis = 0.0;
  double effective_samples = 0.0;
  bool low_effective_samples = false;  // effective sample size below 100

  bool covers(double value) const { return ci_low <= value && value <= ci_high; }
};

namespace detail {

/// Central moment sums of a sample, mergeable in a fixed order.
struct Moments {
  double n = 0.0, mean = 0.0, m2 = 0.0, m3 = 0.0, m4 = 0.0;

  static Moments of(std::span<const double> xs) {
    Moments m;
    m.n = static_cast<double>(xs.size());
    if (xs.empty()) return m;
    for (double x : xs) m.mean += x;
    m.mean /= m.n;
    for (double x : xs) {
      const double d = x - m.mean, d2 = d * d;
      m.m2 += d2;
      m.m3 += d2 * d;
      m.m4 += d2 * d2;
    }
    return m;
  }

  static Moments merge(const Moments& a, const Moments& b) {
    if (a.n == 0.0) return b;
    if (b.n == 0.0) return a;
    Moments m;
    m.n = a.n + b.n;
    const double d = b.mean - a.mean, d2 = d * d, n = m.n;
    m.mean = a.mean + d * b.n / n;
    m.m2 = a.m2 + b.m2 + d2 * a.n * b.n / n;
    m.m3 = a.m3 + b.m3 + d2 * d * a.n * b.n * (a.n - b.n) / (n * n) + 3.0 * d * (a.n * b.m2 - b.n * a.m2) / n;
    m.m4 = a.m4 + b.m4 + d2 * d2 * a.n * b.n * (a.n * a.n - a.n * b.n + b.n * b.n) / (n * n * n) +
           6.0 * d2 * (a.n * a.n * b.m2 + b.n * b.n * a.m2) / (n * n) + 4.0 * d * (a.n * b.m3 - b.n * a.m3) / n;
    return m;
  }
};

}  // namespace detail

inline constexpr std::size_t kMonteCarloChunk = 8192;

/// Sample variance of W_T^{(u)} over `samples` seeded paths with a 95% normal
/// CI. Paths are drawn in fixed-size chunks seeded from (seed, chunk index)
/// and merged in chunk order, so the result does not depend on `threads`.
inline MonteCarloEstimate monte_carlo_weight_variance(const ComposedMeasure& measure, const RatioModel& model,
                                                      std::size_t samples, std::uint64_t seed,
                                                      std::size_t threads = 0) {
  MonteCarloEstimate est;
  est.samples = samples;
  if (samples == 0) return est;
  const std::size_t chunks = (samples + kMonteCarloChunk - 1) / kMonteCarloChunk;
  std::vector<detail::Moments> parts(chunks);
  std::vector<std::exception_ptr> errors(chunks);
  auto run = [&](std::size_t chunk) {
    try {
      Rng rng(mix_seed(seed, chunk));
      const std::size_t begin = chunk * kMonteCarloChunk;
      const std::size_t n = std::min(kMonteCarloChunk, samples - begin);
      std::vector<double> w(n);
      for (double& x : w) x = weight_process(measure, model, measure.sample(rng)).weight();
      parts[chunk] = detail::Moments::of(w);
    } catch (...) {
      errors[chunk] = std::current_exception();
    }
  };
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, chunks);
  if (threads <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) run(c);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < threads; ++k)
      pool.emplace_back([&, k] {
        for (std::size_t c = k; c < chunks; c += threads) run(c);
      });
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  detail::Moments all;
  for (const auto& p : parts) all = detail::Moments::merge(all, p);
  const double n = all.n;
  est.mean = all.mean;
  if (n < 2.0) return est;
  est.variance = all.m2 / (n - 1.0);
  const double sigma2 = all.m2 / n;
  const double mu4 = all.m4 / n;
  const double var_s2 = std::max(0.0, (mu4 - sigma2 * sigma2 * (n - 3.0) / (n - 1.0)) / n);
  est.standard_error = std::sqrt(var_s2);
  est.ci_low = est.variance - 1.959963984540054 * est.standard_error;
  est.ci_high = est.variance + 1.959963984540054 * est.standard_error;
  if (sigma2 > 0.0) {
    est.kurtosis = mu4 / (sigma2 * sigma2);
    est.effective_samples = est.kurtosis > 1.0 ? std::min(n, 2.0 * n / (est.kurtosis - 1.0)) : n;
  } else {
    est.effective_samples = n;
  }
  est.low_effective_samples = est.effective_samples < 100.0;
  return est;
}

}  // namespace ctrlsim

#endif  // CTRLSIM_ANALYSIS_HPP
