#ifndef CTRLSIM_CLI_HPP
#define CTRLSIM_CLI_HPP

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "ctrlsim/analysis.hpp"
#include "ctrlsim/estimation.hpp"
#include "ctrlsim/fixtures.hpp"
#include "ctrlsim/io.hpp"

namespace ctrlsim {

inline constexpr int kExitPass = 0;
inline constexpr int kExitDiagnostic = 1;
inline constexpr int kExitConfig = 2;

struct ExperimentConfig {
  std::string suite;
  std::string env;
  std::optional<std::string> out;
  std::uint64_t seed = 1;
  std::optional<std::size_t> horizon;
  std::optional<double> eta;
  std::size_t samples = 0;
  std::size_t family = 20;
  std::size_t seeds = 10;
  double alpha = 1.0;
  std::vector<std::size_t> ladder{100, 1000, 10000, 100000};
  std::string fault;
  std::string policy;
  std::string kernel = "true";
  std::string control = "mix";
};

struct SuiteResult {
  std::vector<ReportRow> rows;
  std::vector<std::string> notes;

  bool passed() const {
    for (const auto& r : rows)
      if (r.outcome == Outcome::fail) return false;
    return true;
  }
};

/// Configuration errors exit 2; everything else found while running is a diagnostic failure.
inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::parse:
    case ErrorKind::invalid_argument:
    case ErrorKind::budget_exceeded:
    case ErrorKind::unknown_policy:
    case ErrorKind::normalization:
    case ErrorKind::missing_context:
      return kExitConfig;
    default:
      return kExitDiagnostic;
  }
}

namespace detail {

/// Exceptions thrown while reading configuration, before any diagnostic runs.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <class Fn>
auto configure(Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

inline ReportRow check_row(std::string diagnostic, std::string env, std::string kernel, std::string pair,
                           std::string control, std::size_t T, double value, double expected, double tolerance) {
  const bool ok = std::abs(value - expected) <= tolerance;
  return ReportRow{std::move(diagnostic), std::move(env), std::move(kernel), std::move(pair), std::move(control), T,
                   value, expected, tolerance, ok ? Outcome::pass : Outcome::fail};
}

inline ReportRow at_most_row(std::string diagnostic, std::string env, std::string kernel, std::string pair,
                             std::string control, std::size_t T, double value, double tolerance) {
  const bool ok = value <= tolerance;
  return ReportRow{std::move(diagnostic), std::move(env), std::move(kernel), std::move(pair), std::move(control), T,
                   value, std::nullopt, tolerance, ok ? Outcome::pass : Outcome::fail};
}

inline ReportRow error_row(std::string diagnostic, std::string env, std::string kernel, std::string pair,
                           std::string control, std::size_t T) {
  return ReportRow{std::move(diagnostic), std::move(env), std::move(kernel), std::move(pair), std::move(control), T,
                   std::nan(""), std::nullopt, std::nullopt, Outcome::fail};
}

inline std::string pair_name(const AgentPolicy& b, const AgentPolicy& e) { return b.tag + ">" + e.tag; }

/// Perturbs one outcome row of a built-in so its canonical values no longer hold.
inline void inject_fault(Fixture& f, const std::string& fault) {
  if (fault.empty()) return;
  if (fault == "recommender-outcome" && f.name == "recommender") {
    f.spec.user_dynamics.at({0, 1}) = {0.0, 0.3, 0.7};
  } else if (fault == "two-step-outcome" && f.name == "two-step") {
    f.spec.user_dynamics.at({1, 0}) = {0.0, 0.0, 0.4, 0.6};
  } else if (fault != "recommender-outcome" && fault != "two-step-outcome") {
    throw ConfigError("unknown fault '" + fault + "'");
  }
}

inline double success_mass(const EnvironmentSpec& spec, const AgentPolicy& policy, Symbol success) {
  double s = 0.0;
  for (const auto& wt : enumerate_trajectories(spec, policy))
    if (wt.trajectory.user(spec.horizon) == success) s += wt.probability;
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Suites

inline SuiteResult run_worked_examples(const ExperimentConfig& cfg) {
  constexpr double tol = 1e-9;
  SuiteResult res;
  auto& rows = res.rows;
  using detail::check_row;

  Fixture rec = recommender_fixture();
  Fixture two = two_step_fixture();
  detail::inject_fault(rec, cfg.fault);
  detail::inject_fault(two, cfg.fault);

  {
    const std::string env = rec.name;
    const AgentPolicy& always0 = rec.policy("always0");
    const Symbol y1 = rec.spec.users.index("y1");
    const Distribution prior = learned_prior(rec.labeler, rec.spec, rec.behavior);
    rows.push_back(check_row("learned_prior", env, "-", rec.behavior.tag, "1", 2, prior[1], 0.5, tol));
    rows.push_back(check_row("true_success", env, "-", rec.evaluation.tag, "-", 2,
                             detail::success_mass(rec.spec, rec.evaluation, y1), 0.8, tol));
    rows.push_back(check_row("true_success", env, "-", always0.tag, "-", 2, detail::success_mass(rec.spec, always0, y1),
                             0.2, tol));
    const SimulatorKernel k = trajectory_conditioned_kernel(rec.spec, rec.behavior, rec.labeler);
    const ComposedMeasure sim = compose(k, rec.evaluation, Control::mixture());
    double sim_success = 0.0;
    sim.walk([&](std::optional<Symbol>, const SymbolSeq&, const SymbolSeq& tau, double mass) {
      if (tau[2] == y1) sim_success += mass;
    });
    const std::string pair = detail::pair_name(rec.behavior, rec.evaluation);
    rows.push_back(check_row("simulated_success", env, "trajectory_conditioned", pair, "mix", 2, sim_success, 0.5, tol));
    rows.push_back(check_row("kernel_row_y1_after_1", env, "trajectory_conditioned", rec.behavior.tag, "1", 2,
                             k.emission(Control::fixed(1), {0, 1})[y1], 1.0, tol));
    const Trajectory tau = parse_history(rec.spec.users, rec.spec.agents, "q,1,y1,0");
    const BiasReport b = verify_lookahead_bias(rec.spec, rec.evaluation, rec.behavior, rec.labeler, tau);
    rows.push_back(check_row("bias_factor_sim_over_true", env, "trajectory_conditioned", pair, "mix", 2,
                             b.sim_over_true, 0.625, tol));
    rows.push_back(check_row("bias_factor_rhs", env, "trajectory_conditioned", pair, "mix", 2, b.rhs, 0.625, tol));
    const FactorBreakdown w = trajectory_density_ratio(true_measure(rec.spec, rec.evaluation), sim.path_measure(false),
                                                       AnnotatedPath{std::nullopt, {}, tau});
    rows.push_back(check_row("density_ratio_true_over_sim", env, "trajectory_conditioned", pair, "mix", 2, w.weight, 1.6,
                             tol));
    const ActionDependence dep = is_action_dependent(rec.labeler, rec.spec, rec.behavior);
    rows.push_back(check_row("action_dependence_gap", env, "-", rec.behavior.tag, "1", 1,
                             dep.witness ? dep.witness->with_action - dep.witness->without_action : 0.0, 0.3, tol));
  }

  {
    const std::string env = two.name;
    const std::string pair = detail::pair_name(two.behavior, two.evaluation);
    rows.push_back(check_row("label_prior", env, "-", two.behavior.tag, "1", 2,
                             learned_prior(two.labeler, two.spec, two.behavior)[1], 0.75, tol));
    rows.push_back(check_row("label_prior", env, "-", two.evaluation.tag, "1", 2,
                             learned_prior(two.labeler, two.spec, two.evaluation)[1], 0.30, tol));
    const BeliefEngine beliefs(two.spec, two.labeler);
    const double expected_m[2][2] = {{4.0 / 3.0, 2.0 / 3.0}, {5.0 / 3.0, 1.0 / 3.0}};  // [policy][u]
    const AgentPolicy* policies[2] = {&two.behavior, &two.evaluation};
    for (int p = 0; p < 2; ++p)
      for (Symbol u = 0; u < 2; ++u)
        rows.push_back(check_row("belief_update(" + two.spec.users.name(u) + ")", env, "-", policies[p]->tag, "1", 1,
                                 beliefs.belief_update(*policies[p], History{}, u, 1), expected_m[p][u], tol));
    const SimulatorKernel k = trajectory_conditioned_kernel(two.spec, two.behavior, two.labeler);
    const double expected_rho[2] = {1.25, 0.5};
    for (Symbol u = 0; u < 2; ++u)
      rows.push_back(check_row("rho(" + two.spec.users.name(u) + ")", env, "trajectory_conditioned", pair, "1", 1,
                               user_generative_error(two.spec, two.behavior, two.evaluation, two.labeler, k, History{}, u, 1),
                               expected_rho[u], tol));
    const Sensitivity s = local_label_sensitivity(two.spec, two.behavior, two.evaluation, two.labeler, k, History{}, 1);
    rows.push_back(check_row("local_label_sensitivity", env, "trajectory_conditioned", pair, "1", 1, s.variance, 0.125, tol));
    rows.push_back(check_row("mean_rho", env, "trajectory_conditioned", pair, "1", 1, s.mean, 1.0, tol));
    const VarianceReport v = variance_decomposition(two.spec, two.behavior, two.evaluation, two.labeler, k, 1, 1);
    rows.push_back(check_row("weight_variance", env, "trajectory_conditioned", pair, "1", 1, v.direct, 0.125, tol));
    rows.push_back(check_row("variance_decomposition", env, "trajectory_conditioned", pair, "1", 1, v.decomposition,
                             0.125, tol));
    rows.push_back(check_row("geometric_lower_bound", env, "trajectory_conditioned", pair, "1", 1, v.bound, 0.125, tol));
  }
  return res;
}

namespace detail {

/// Every kernel paradigm for one fixture, paired with its ratio model.
struct KernelCase {
  KernelKind kind;
  SimulatorKernel kernel;
  Control control;
  std::shared_ptr<const RatioModel> model;
  std::string control_name;
};

inline std::vector<KernelCase> kernel_cases(const Fixture& f, Symbol z, std::size_t steps,
                                            const std::vector<KernelKind>& kinds) {
  std::vector<KernelCase> out;
  const std::string zname = f.labeler.controls.name(z);
  for (KernelKind kind : kinds) {
    switch (kind) {
      case KernelKind::trajectory_conditioned:
        out.push_back({kind, trajectory_conditioned_kernel(f.spec, f.behavior, f.labeler), Control::fixed(z),
                       std::make_shared<PosthocRatio>(f.spec, f.labeler, std::vector{f.behavior}, f.evaluation), zname});
        break;
      case KernelKind::policy_conditioned:
        out.push_back({kind, policy_conditioned_kernel(f.spec, f.labeler, {f.behavior, f.evaluation}),
                       Control::fixed(z, f.evaluation.tag),
                       std::make_shared<PosthocRatio>(f.spec, f.labeler, std::vector{f.behavior, f.evaluation},
                                                      f.evaluation),
                       zname});
        break;
      case KernelKind::dynamic_state: {
        const StepwiseLabeler sw = f.stepwise ? *f.stepwise : derive_stepwise_labeler(f.spec, f.behavior, f.labeler);
        out.push_back({kind, dynamic_state_kernel(f.spec, f.behavior, sw), Control::mixture(),
                       std::make_shared<DynamicRatio>(f.spec, sw, f.evaluation, steps), "mix"});
        break;
      }
      case KernelKind::a_priori: {
        const AprioriControl a = apriori_from_initial_intent(f.spec);
        out.push_back({kind, apriori_kernel(a), Control::mixture(),
                       std::make_shared<AprioriRatio>(a, f.evaluation, steps), "mix"});
        break;
      }
      case KernelKind::parameterized_dynamics: {
        const ParameterizedDynamics pd = f.dynamics ? *f.dynamics : lift_environment(f.spec);
        out.push_back({kind, parameterized_dynamics_kernel(pd), Control::mixture(),
                       std::make_shared<ParameterizedRatio>(pd, f.evaluation, steps), "mix"});
        break;
      }
    }
  }
  return out;
}

inline const std::vector<KernelKind>& all_kinds() {
  static const std::vector<KernelKind> kinds{KernelKind::trajectory_conditioned, KernelKind::policy_conditioned,
                                             KernelKind::dynamic_state, KernelKind::a_priori,
                                             KernelKind::parameterized_dynamics};
  return kinds;
}

inline std::vector<AgentPolicy> random_policies(const EnvironmentSpec& spec, std::uint64_t seed, std::size_t n) {
  Rng rng(seed);
  std::vector<AgentPolicy> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(tabulate_policy(spec, "random" + std::to_string(i),
                                  [&](const History&) { return random_distribution(rng, spec.agents.size()); }));
  return out;
}

}  // namespace detail

inline SuiteResult run_theorem_suite(const ExperimentConfig& cfg) {
  using detail::at_most_row;
  const std::size_t T = cfg.horizon.value_or(3);
  std::vector<Fixture> family = detail::configure([&] {
    if (T < 1) fail(ErrorKind::invalid_argument, "horizon must be at least 1");
    RandomSizes sizes;
    sizes.horizon = T;
    // the latent path sum is the largest enumeration
    require_exact_budget(sizes.users * sizes.latent, sizes.agents, T);
    std::vector<Fixture> out;
    if (!cfg.env.empty()) {
      Fixture f = load_fixture(cfg.env);
      if (cfg.horizon && *cfg.horizon != f.spec.horizon)
        fail(ErrorKind::invalid_argument, "--horizon must match the environment file's horizon");
      out.push_back(std::move(f));
    } else {
      for (std::size_t i = 0; i < cfg.family; ++i) out.push_back(random_fixture(mix_seed(cfg.seed, i), sizes));
    }
    return out;
  });

  SuiteResult res;
  auto& rows = res.rows;
  for (std::size_t i = 0; i < family.size(); ++i) {
    const Fixture& f = family[i];
    const std::string env = f.name;
    const std::string pair = detail::pair_name(f.behavior, f.evaluation);
    const std::size_t H = f.spec.horizon;
    auto guarded = [&](const std::string& diag, const std::string& kernel, const std::string& ctl, std::size_t steps,
                       const std::function<void()>& body) {
      try {
        body();
      } catch (const Error& e) {
        rows.push_back(detail::error_row(diag, env, kernel, pair, ctl, steps));
        res.notes.push_back(env + " " + diag + ": " + e.what());
      }
    };

    guarded("lookahead_gap", "trajectory_conditioned", "mix", H, [&] {
      rows.push_back(at_most_row("lookahead_gap", env, "trajectory_conditioned", pair, "mix", H,
                                 max_lookahead_gap(f.spec, f.evaluation, f.behavior, f.labeler), 1e-9));
    });

    const SimulatorKernel k = trajectory_conditioned_kernel(f.spec, f.behavior, f.labeler);
    const PosthocRatio model(f.spec, f.labeler, {f.behavior}, f.evaluation);
    for (Symbol z = 0; z < f.labeler.controls.size(); ++z) {
      if (!(k.prior()[z] > 0.0)) continue;
      const std::string zn = f.labeler.controls.name(z);
      for (std::size_t t = 1; t <= H; ++t) {
        guarded("decomposition_gap", "trajectory_conditioned", zn, t, [&] {
          const VarianceReport v = variance_decomposition(compose(k, f.evaluation, Control::fixed(z), t), model);
          rows.push_back(at_most_row("decomposition_gap", env, "trajectory_conditioned", pair, zn, t,
                                     std::abs(v.direct - v.decomposition), 1e-8));
          const double slack = 1e-12 * std::max(1.0, v.bound);
          rows.push_back(ReportRow{"variance_vs_bound", env, "trajectory_conditioned", pair, zn, t, v.direct, v.bound,
                                   slack, v.meets_bound() ? Outcome::pass : Outcome::fail});
        });
      }
      guarded("martingale", "trajectory_conditioned", zn, H, [&] {
        const WeightDiagnostics d = weight_diagnostics(compose(k, f.evaluation, Control::fixed(z)), model);
        for (std::size_t t = 1; t <= H; ++t)
          rows.push_back(at_most_row("martingale", env, "trajectory_conditioned", pair, zn, t,
                                     d.martingale_deviation[t - 1], 1e-10));
      });
    }

    for (auto kind : {KernelKind::policy_conditioned, KernelKind::dynamic_state, KernelKind::a_priori,
                      KernelKind::parameterized_dynamics}) {
      const std::string kn(to_string(kind));
      guarded("mitigation_variance", kn, "-", H, [&] {
        const Symbol z = static_cast<Symbol>(f.labeler.controls.size() - 1);
        for (const auto& c : detail::kernel_cases(f, z, H, {kind})) {
          const WeightDiagnostics d = weight_diagnostics(compose(c.kernel, f.evaluation, c.control), *c.model);
          rows.push_back(at_most_row("mitigation_variance", env, kn, pair, c.control_name, H, std::abs(d.variance), 1e-10));
          rows.push_back(at_most_row("mitigation_rho_deviation", env, kn, pair, c.control_name, H, d.max_rho_deviation,
                                     1e-10));
        }
      });
    }

    guarded("invariance_rho_deviation", "parameterized_dynamics", "all", H, [&] {
      const ParameterizedDynamics pd = f.dynamics ? *f.dynamics : lift_environment(f.spec);
      std::vector<std::pair<AgentPolicy, AgentPolicy>> pairs{{f.behavior, f.evaluation}};
      const auto extra = detail::random_policies(f.spec, mix_seed(cfg.seed ^ 0x696e76617269616eULL, i), 8);
      for (std::size_t p = 0; p + 1 < extra.size(); p += 2) pairs.emplace_back(extra[p], extra[p + 1]);
      const InvarianceReport r = verify_policy_invariance(pd, pairs);
      rows.push_back(at_most_row("invariance_rho_deviation", env, "parameterized_dynamics", "5 pairs", "all", H,
                                 r.max_rho_deviation, 1e-10));
      rows.push_back(at_most_row("invariance_kernel_deviation", env, "parameterized_dynamics", "5 pairs", "all", H,
                                 r.max_kernel_deviation, 1e-10));
    });
  }
  return res;
}

inline SuiteResult run_variance_sweep(const ExperimentConfig& cfg) {
  struct Setup {
    Fixture fixture;
    std::size_t horizon;
    Symbol z;
  };
  const Setup setup = detail::configure([&] {
    Fixture f = load_fixture(cfg.env.empty() ? "chain" : cfg.env);
    const std::size_t H = cfg.horizon.value_or(f.spec.horizon);
    if (H < 1 || H > f.spec.horizon) fail(ErrorKind::invalid_argument, "--horizon must lie in [1, environment horizon]");
    if (cfg.eta && !(*cfg.eta >= 0.0)) fail(ErrorKind::invalid_argument, "--eta must be non-negative");
    require_exact_budget(f.spec.users.size(), f.spec.agents.size(), f.spec.horizon);
    const Symbol z = static_cast<Symbol>(f.labeler.controls.size() - 1);
    return Setup{std::move(f), H, z};
  });
  const Fixture& f = setup.fixture;
  const std::string env = f.name;
  const std::string pair = detail::pair_name(f.behavior, f.evaluation);

  SuiteResult res;
  auto& rows = res.rows;
  for (std::size_t ki = 0; ki < detail::all_kinds().size(); ++ki) {
    const KernelKind kind = detail::all_kinds()[ki];
    const std::string kn(to_string(kind));
    std::vector<detail::KernelCase> cases;
    try {
      cases = detail::kernel_cases(f, setup.z, f.spec.horizon, {kind});
    } catch (const Error& e) {
      rows.push_back(detail::error_row("variance", env, kn, pair, "-", 0));
      res.notes.push_back(kn + ": " + e.what());
      continue;
    }
    const auto& c = cases.front();
    std::vector<std::size_t> ts;
    std::vector<double> vs;
    for (std::size_t T = 1; T <= setup.horizon; ++T) {
      std::optional<double> exact;
      try {
        const ComposedMeasure m = compose(c.kernel, f.evaluation, c.control, T);
        const VarianceReport v = variance_decomposition(m, *c.model, cfg.eta);
        exact = v.direct;
        ts.push_back(T);
        vs.push_back(v.direct);
        rows.push_back(ReportRow{"variance", env, kn, pair, c.control_name, T, v.direct, v.bound,
                                 1e-12 * std::max(1.0, v.bound), v.meets_bound() ? Outcome::pass : Outcome::fail});
        rows.push_back(detail::check_row("decomposition", env, kn, pair, c.control_name, T, v.decomposition, v.direct, 1e-8));
        if (cfg.samples > 0) {
          const MonteCarloEstimate mc = monte_carlo_weight_variance(m, *c.model, cfg.samples, mix_seed(cfg.seed, ki * 1000 + T));
          rows.push_back(ReportRow{"mc_variance", env, kn, pair, c.control_name, T, mc.variance, exact,
                                   (mc.ci_high - mc.ci_low) / 2.0, Outcome::info});
          if (mc.low_effective_samples)
            res.notes.push_back(kn + " T=" + std::to_string(T) + ": effective sample size below 100");
        }
      } catch (const Error& e) {
        rows.push_back(detail::error_row("variance", env, kn, pair, c.control_name, T));
        res.notes.push_back(kn + " T=" + std::to_string(T) + ": " + e.what());
      }
    }
    if (vs.size() >= 2)
      rows.push_back(ReportRow{"eta_hat", env, kn, pair, c.control_name, ts.back(), estimate_eta_hat(ts, vs),
                               std::nullopt, std::nullopt, Outcome::info});
  }
  return res;
}

inline SuiteResult run_fit_study(const ExperimentConfig& cfg) {
  const Fixture f = detail::configure([&] {
    if (!(cfg.alpha >= 0.0)) fail(ErrorKind::invalid_argument, "--alpha must be non-negative");
    if (cfg.ladder.empty()) fail(ErrorKind::invalid_argument, "--ladder must not be empty");
    for (std::size_t i = 0; i < cfg.ladder.size(); ++i)
      if (cfg.ladder[i] == 0 || (i > 0 && cfg.ladder[i] <= cfg.ladder[i - 1]))
        fail(ErrorKind::invalid_argument, "--ladder must be positive and strictly increasing");
    return load_fixture(cfg.env.empty() ? "recommender" : cfg.env);
  });
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < cfg.seeds; ++i) seeds.push_back(mix_seed(cfg.seed, i));
  SuiteResult res;
  const auto curve = convergence_curve(f.spec, f.behavior, f.labeler, cfg.ladder, seeds, cfg.alpha);
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const auto& r = curve[i];
    ReportRow row{"tv_median", f.name, "trajectory_conditioned", f.behavior.tag, "all", f.spec.horizon,
                  r.median, std::nullopt, r.iqr(), Outcome::info};
    if (i > 0) {
      row.bound = curve[i - 1].median;
      row.outcome = r.median < curve[i - 1].median ? Outcome::pass : Outcome::fail;
    }
    row.control = "N=" + std::to_string(r.samples);
    row.order = i;
    res.rows.push_back(std::move(row));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Entry point

namespace detail {

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << text;
}

inline void print_summary(std::ostream& out, const std::string& suite, const SuiteResult& res, bool all_rows) {
  std::size_t failures = 0;
  for (const auto& r : res.rows) {
    if (r.outcome == Outcome::fail) ++failures;
    if (!all_rows && r.outcome != Outcome::fail) continue;
    out << (r.outcome == Outcome::pass ? "PASS " : r.outcome == Outcome::fail ? "FAIL " : "INFO ") << r.environment
        << ' ' << r.diagnostic << " kernel=" << r.kernel << " policy=" << r.policy_pair << " control=" << r.control
        << " T=" << r.steps << " value=" << format_number(r.value, 6);
    if (r.bound) out << " ref=" << format_number(*r.bound, 6);
    if (r.tolerance) out << " tol=" << format_number(*r.tolerance, 6);
    out << '\n';
  }
  for (const auto& n : res.notes) out << "note: " << n << '\n';
  out << suite << ": " << res.rows.size() << " rows, " << failures << " failed\n";
}

inline std::vector<std::size_t> parse_ladder(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t pos = 0;
      const double v = std::stod(item, &pos);
      if (pos != item.size() || !(v >= 0.0) || v != std::floor(v) || v > 1e12) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("bad --ladder entry '" + item + "'");
    }
  }
  return out;
}

inline int run_simulate(const ExperimentConfig& cfg, std::ostream& out) {
  struct Setup {
    Fixture fixture;
    AgentPolicy policy;
    std::optional<detail::KernelCase> kernel;
  };
  const Setup s = configure([&] {
    Fixture f = load_fixture(cfg.env.empty() ? "recommender" : cfg.env);
    AgentPolicy policy = f.policy(cfg.policy.empty() ? f.evaluation.tag : cfg.policy);
    std::optional<detail::KernelCase> kc;
    if (cfg.kernel != "true") {
      std::optional<KernelKind> kind;
      for (KernelKind k : all_kinds())
        if (to_string(k) == cfg.kernel) kind = k;
      if (!kind) fail(ErrorKind::invalid_argument, "unknown kernel '" + cfg.kernel + "'");
      Symbol z = static_cast<Symbol>(f.labeler.controls.size() - 1);
      kc = kernel_cases(f, z, f.spec.horizon, {*kind}).front();
      if (cfg.control != "mix") {
        if (!kc->kernel.has_global_control()) fail(ErrorKind::invalid_argument, "kernel has no global control");
        kc->control.value = kc->kernel.controls.index(cfg.control);
      } else if (kc->kernel.has_global_control()) {
        kc->control.value.reset();
      }
      if (kc->kind == KernelKind::policy_conditioned) kc->control.policy_tag = policy.tag;
    }
    return Setup{std::move(f), std::move(policy), std::move(kc)};
  });
  const Fixture& f = s.fixture;
  std::string text;
  Rng rng(cfg.seed);
  if (!s.kernel) {
    for (std::size_t i = 0; i < cfg.samples; ++i) {
      const Trajectory tau = sample_trajectory(f.spec, s.policy, rng);
      const Symbol z = static_cast<Symbol>(rng.categorical(f.labeler.at(tau.symbols())));
      text += format_history(f.spec.users, f.spec.agents, tau.symbols()) + '\t' + f.labeler.controls.name(z) + '\n';
    }
  } else {
    const auto& k = s.kernel->kernel;
    const ComposedMeasure m = compose(k, s.policy, s.kernel->control);
    for (std::size_t i = 0; i < cfg.samples; ++i) {
      const AnnotatedPath p = m.sample(rng);
      std::string label;
      if (p.control) {
        label = k.controls.name(*p.control);
      } else {
        for (std::size_t t = 0; t < p.step_controls.size(); ++t)
          label += (t ? "|" : "") + k.step_controls.name(p.step_controls[t]);
      }
      text += format_history(f.spec.users, f.spec.agents, p.trajectory.symbols()) + '\t' + label + '\n';
    }
  }
  if (cfg.out) write_file(std::filesystem::path(*cfg.out) / "simulate.tsv", text);
  else out << text;
  return kExitPass;
}

inline int run_export(const ExperimentConfig& cfg) {
  if (!cfg.out) throw ConfigError("export needs --out");
  const Fixture f = configure([&] { return load_fixture(cfg.env.empty() ? "recommender" : cfg.env); });
  std::string stem = std::filesystem::path(f.name).stem().string();
  const std::filesystem::path dir(*cfg.out);
  write_file(dir / (stem + ".json"), write_environment(environment_file(f)).dump(2) + "\n");
  write_file(dir / (stem + ".kernel.json"),
             kernel_to_json(trajectory_conditioned_kernel(f.spec, f.behavior, f.labeler)).dump(2) + "\n");
  return kExitPass;
}

}  // namespace detail

/// Parses arguments and runs one suite. Returns 0 when every check passes,
/// 1 on a diagnostic failure, 2 on a configuration or parse error.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Diagnostics for controllable user simulators", "ctrlsim"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  ExperimentConfig cfg;
  std::string ladder;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--env", cfg.env, "Built-in environment name or path to a JSON environment file");
    sub->add_option("--seed", cfg.seed, "Root seed");
    sub->add_option("--out", cfg.out, "Directory for the CSV report");
    sub->add_option("--horizon", cfg.horizon, "Horizon override");
    sub->add_option("--eta", cfg.eta, "Sensitivity floor override for the lower bound");
    sub->add_option("--samples", cfg.samples, "Monte-Carlo or sampling count");
  };
  CLI::App* examples = app.add_subcommand("examples", "Check the two worked examples");
  common(examples);
  examples->add_option("--inject-fault", cfg.fault, "Corrupt a built-in (testing)")->group("");
  CLI::App* theorems = app.add_subcommand("theorems", "Check the identities on a seeded random family");
  common(theorems);
  theorems->add_option("--family", cfg.family, "Number of random environments");
  CLI::App* sweep = app.add_subcommand("variance-sweep", "Weight variance against horizon for every kernel");
  common(sweep);
  CLI::App* fit = app.add_subcommand("fit", "Convergence of fitted kernels to the exact conditional");
  common(fit);
  fit->add_option("--seeds", cfg.seeds, "Number of seeds per sample size");
  fit->add_option("--alpha", cfg.alpha, "Additive smoothing");
  fit->add_option("--ladder", ladder, "Comma-separated increasing sample sizes");
  CLI::App* simulate = app.add_subcommand("simulate", "Sample trajectories from the environment or a kernel");
  common(simulate);
  simulate->add_option("--policy", cfg.policy, "Policy tag (default: the evaluation policy)");
  simulate->add_option("--kernel", cfg.kernel, "'true' or a kernel kind");
  simulate->add_option("--control", cfg.control, "Control name, or 'mix' to draw from the prior");
  CLI::App* exporter = app.add_subcommand("export", "Write an environment file and its kernel dump");
  common(exporter);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitPass : kExitConfig;
  }

  try {
    if (!ladder.empty()) cfg.ladder = detail::parse_ladder(ladder);
    if (*simulate) return detail::run_simulate(cfg, out);
    if (*exporter) return detail::run_export(cfg);

    std::string suite;
    SuiteResult res;
    if (*examples) {
      suite = "examples";
      res = run_worked_examples(cfg);
    } else if (*theorems) {
      suite = "theorems";
      res = run_theorem_suite(cfg);
    } else if (*sweep) {
      suite = "variance-sweep";
      res = run_variance_sweep(cfg);
    } else {
      suite = "fit";
      res = run_fit_study(cfg);
    }
    if (cfg.out) detail::write_file(std::filesystem::path(*cfg.out) / (suite + ".csv"), format_csv(res.rows));
    detail::print_summary(out, suite, res, suite == "examples");
    return res.passed() ? kExitPass : kExitDiagnostic;
  } catch (const detail::ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const Error& e) {
    err << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }
}

}  // namespace ctrlsim

#endif  // CTRLSIM_CLI_HPP
