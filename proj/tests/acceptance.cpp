// Acceptance run: one PASS/FAIL line per criterion, every tolerance fixed
// here. Exits non-zero if any criterion fails.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "ctrlsim/analysis.hpp"
#include "ctrlsim/cli.hpp"
#include "ctrlsim/estimation.hpp"
#include "ctrlsim/fixtures.hpp"

using namespace ctrlsim;

namespace {

constexpr double kExampleTol = 1e-9;
constexpr double kBiasTol = 1e-9;
constexpr double kDecompositionTol = 1e-8;
constexpr double kMartingaleTol = 1e-10;
constexpr double kMutationFloor = 1e-6;
constexpr double kMutationScale = 1.5;
constexpr double kMitigationTol = 1e-10;
constexpr double kExactZero = 1e-15;
constexpr double kEtaRecoveryTol = 1e-9;
constexpr double kSeparation = 10.0;
constexpr double kFinalTv = 0.02;
constexpr std::size_t kFamily = 20;
constexpr std::size_t kFitSeeds = 10;
constexpr std::size_t kMonteCarloSamples = 100000;

struct Check {
  bool ok = true;
  std::string detail;

  void expect(bool cond, const std::string& what) {
    if (!cond && ok) detail = what;
    ok = ok && cond;
  }
  void near(double got, double want, double tol, const std::string& what) {
    std::ostringstream s;
    s << what << ": got " << format_number(got) << ", want " << format_number(want);
    expect(std::abs(got - want) <= tol, s.str());
  }
  void at_most(double got, double limit, const std::string& what) {
    std::ostringstream s;
    s << what << ": " << format_number(got) << " > " << format_number(limit);
    expect(got <= limit, s.str());
  }
};

struct Case {
  SimulatorKernel kernel;
  Control control;
  std::shared_ptr<const RatioModel> model;
};

Case make_case(const Fixture& f, KernelKind kind, Symbol z, std::size_t steps) {
  const auto c = detail::kernel_cases(f, z, steps, {kind}).front();
  return {c.kernel, c.control, c.model};
}

WeightDiagnostics diagnostics(const Fixture& f, const Case& c, std::size_t T) {
  return weight_diagnostics(compose(c.kernel, f.evaluation, c.control, T), *c.model);
}

double success_mass(const EnvironmentSpec& spec, const AgentPolicy& pi, Symbol success) {
  double s = 0.0;
  for (const auto& wt : enumerate_trajectories(spec, pi))
    if (wt.trajectory.user(spec.horizon) == success) s += wt.probability;
  return s;
}

std::vector<Fixture> family(std::size_t horizon) {
  std::vector<Fixture> out;
  RandomSizes sizes;
  sizes.horizon = horizon;
  for (std::size_t i = 0; i < kFamily; ++i) out.push_back(random_fixture(mix_seed(2024, i), sizes));
  return out;
}

/// Horizon at which the trajectory-conditioned kernel of `f` stays on the training support.
std::size_t posthoc_horizon(const Fixture& f) { return f.name == "two-step" ? 1 : f.spec.horizon; }

Check recommender() {
  Check c;
  const Fixture f = recommender_fixture();
  c.near(learned_prior(f.labeler, f.spec, f.behavior)[1], 0.5, kExampleTol, "learned prior");
  const double truth = success_mass(f.spec, f.evaluation, 2);
  c.near(truth, 0.8, kExampleTol, "true success");
  const ComposedMeasure sim =
      compose(trajectory_conditioned_kernel(f.spec, f.behavior, f.labeler), f.evaluation, Control::mixture());
  double sim_success = 0.0;
  sim.walk([&](std::optional<Symbol>, const SymbolSeq&, const SymbolSeq& tau, double mass) {
    if (tau[2] == 2) sim_success += mass;
  });
  c.near(sim_success, 0.5, kExampleTol, "simulated success");
  c.near(sim_success / truth, 0.625, kExampleTol, "bias factor");
  return c;
}

Check two_step() {
  Check c;
  const Fixture f = two_step_fixture();
  const BeliefEngine engine(f.spec, f.labeler);
  c.near(engine.belief_update(f.behavior, History{}, 0, 1), 4.0 / 3.0, kExampleTol, "M_b(A)");
  c.near(engine.belief_update(f.evaluation, History{}, 0, 1), 5.0 / 3.0, kExampleTol, "M_e(A)");
  c.near(engine.belief_update(f.behavior, History{}, 1, 1), 2.0 / 3.0, kExampleTol, "M_b(B)");
  c.near(engine.belief_update(f.evaluation, History{}, 1, 1), 1.0 / 3.0, kExampleTol, "M_e(B)");
  const SimulatorKernel k = trajectory_conditioned_kernel(f.spec, f.behavior, f.labeler);
  c.near(user_generative_error(f.spec, f.behavior, f.evaluation, f.labeler, k, History{}, 0, 1), 1.25, kExampleTol,
         "rho(A)");
  c.near(user_generative_error(f.spec, f.behavior, f.evaluation, f.labeler, k, History{}, 1, 1), 0.5, kExampleTol,
         "rho(B)");
  c.near(local_label_sensitivity(f.spec, f.behavior, f.evaluation, f.labeler, k, History{}, 1).variance, 0.125,
         kExampleTol, "V_1");
  return c;
}

Check look_ahead_bias() {
  Check c;
  double worst = 0.0;
  for (const Fixture& f : family(3)) worst = std::max(worst, max_lookahead_gap(f.spec, f.evaluation, f.behavior, f.labeler));
  c.at_most(worst, kBiasTol, "max gap over the family");
  return c;
}

Check variance_growth() {
  Check c;
  for (const Fixture& f : family(4)) {
    const SimulatorKernel k = trajectory_conditioned_kernel(f.spec, f.behavior, f.labeler);
    for (Symbol z = 0; z < 2; ++z) {
      for (std::size_t T = 1; T <= 4; ++T) {
        const VarianceReport r = variance_decomposition(f.spec, f.behavior, f.evaluation, f.labeler, k, z, T);
        c.at_most(std::abs(r.direct - r.decomposition), kDecompositionTol, f.name + " decomposition");
        c.expect(r.meets_bound(), f.name + " T=" + std::to_string(T) + ": variance below (1+eta)^T - 1");
      }
    }
  }
  return c;
}

Check martingale() {
  Check c;
  std::vector<Fixture> envs{recommender_fixture(), two_step_fixture(), chain_fixture()};
  for (Fixture& f : family(3)) envs.push_back(std::move(f));
  for (const Fixture& f : envs) {
    for (KernelKind kind : detail::all_kinds()) {
      const std::size_t T = kind == KernelKind::trajectory_conditioned ? posthoc_horizon(f) : f.spec.horizon;
      const WeightDiagnostics d = diagnostics(f, make_case(f, kind, 1, T), T);
      double dev = 0.0;
      for (double m : d.martingale_deviation) dev = std::max(dev, m);
      c.at_most(dev, kMartingaleTol, f.name + " " + std::string(to_string(kind)));
    }
  }
  // a corrupted row is caught for every kernel kind
  std::size_t i = 0;
  for (const Fixture& f : family(3)) {
    for (KernelKind kind : detail::all_kinds()) {
      Case k = make_case(f, kind, 0, f.spec.horizon);
      Rng rng(mix_seed(77, i++));
      const AnnotatedPath path = compose(k.kernel, f.evaluation, k.control).sample(rng);
      const std::size_t t = static_cast<std::size_t>(rng.next() % f.spec.horizon);
      const SymbolSeq h(path.trajectory.symbols().begin(),
                        path.trajectory.symbols().begin() + static_cast<std::ptrdiff_t>(2 * t));
      Distribution& row = k.kernel.mutable_emission(Control{path.control, k.control.policy_tag}, h);
      *std::max_element(row.begin(), row.end()) *= kMutationScale;
      const WeightDiagnostics d = diagnostics(f, k, f.spec.horizon);
      c.expect(d.tower_deviation > kMutationFloor, f.name + " " + std::string(to_string(kind)) + ": mutation missed");
    }
  }
  return c;
}

const std::vector<KernelKind> kMitigations{KernelKind::a_priori, KernelKind::dynamic_state,
                                           KernelKind::policy_conditioned, KernelKind::parameterized_dynamics};

Check mitigations() {
  Check c;
  std::vector<Fixture> envs{recommender_fixture(), two_step_fixture(), chain_fixture()};
  for (Fixture& f : family(3)) envs.push_back(std::move(f));
  for (const Fixture& f : envs) {
    for (KernelKind kind : kMitigations) {
      const WeightDiagnostics d = diagnostics(f, make_case(f, kind, 1, f.spec.horizon), f.spec.horizon);
      const std::string what = f.name + " " + std::string(to_string(kind));
      c.at_most(d.max_rho_deviation, kMitigationTol, what + " |rho-1|");
      c.at_most(std::abs(d.variance), kMitigationTol, what + " variance");
    }
  }
  const Fixture f = two_step_fixture();
  const WeightDiagnostics d = diagnostics(f, make_case(f, KernelKind::trajectory_conditioned, 1, 1), 1);
  c.near(d.variance, 0.125, kExactZero, "two-step trajectory-conditioned Var(W_1)");
  return c;
}

Check growth_rates() {
  Check c;
  const Fixture f = chain_fixture();
  auto eta_hat = [&](KernelKind kind) {
    std::vector<double> v;
    for (std::size_t T = 1; T <= f.spec.horizon; ++T) v.push_back(diagnostics(f, make_case(f, kind, 1, T), T).variance);
    return estimate_eta_hat(v);
  };
  const double base = eta_hat(KernelKind::trajectory_conditioned);
  for (KernelKind kind : kMitigations) {
    const double m = std::abs(eta_hat(kind));
    c.expect(base >= kSeparation * m, std::string(to_string(kind)) + ": eta_hat " + format_number(m) +
                                          " not separated from " + format_number(base));
  }
  for (double eta : {0.05, 0.123234376283, 0.7}) {
    std::vector<double> v;
    for (int T = 1; T <= 6; ++T) v.push_back(std::pow(1.0 + eta, T) - 1.0);
    c.near(estimate_eta_hat(v), eta, kEtaRecoveryTol, "designed eta");
  }
  return c;
}

Check fitted_convergence() {
  Check c;
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 1; s <= kFitSeeds; ++s) seeds.push_back(s);
  for (const Fixture& f : {recommender_fixture(), two_step_fixture()}) {
    const auto rows = convergence_curve(f.spec, f.behavior, f.labeler, {100, 1000, 10000, 100000}, seeds, 1.0);
    for (std::size_t i = 1; i < rows.size(); ++i)
      c.expect(rows[i].median < rows[i - 1].median, f.name + ": median TV did not decrease at N=" +
                                                        std::to_string(rows[i].samples));
    c.expect(rows.back().median < kFinalTv, f.name + ": final median TV " + format_number(rows.back().median));
  }
  return c;
}

Check monte_carlo() {
  Check c;
  const Fixture f = two_step_fixture();
  const Case k = make_case(f, KernelKind::trajectory_conditioned, 1, 1);
  const ComposedMeasure m = compose(k.kernel, f.evaluation, k.control, 1);
  const MonteCarloEstimate a = monte_carlo_weight_variance(m, *k.model, kMonteCarloSamples, 1);
  const MonteCarloEstimate b = monte_carlo_weight_variance(m, *k.model, kMonteCarloSamples, 1);
  c.expect(a.covers(0.125), "CI [" + format_number(a.ci_low) + ", " + format_number(a.ci_high) + "] misses 0.125");
  c.expect(a.variance == b.variance && a.ci_low == b.ci_low, "same seed gave a different estimate");
  return c;
}

Check cli_contract() {
  Check c;
  namespace fs = std::filesystem;
  const fs::path root = fs::temp_directory_path() / "ctrlsim-acceptance";
  auto call = [](std::vector<std::string> args) {
    args.insert(args.begin(), "ctrlsim");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  };
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  const std::vector<std::pair<std::vector<std::string>, std::string>> suites{
      {{"examples"}, "examples.csv"},
      {{"theorems"}, "theorems.csv"},
      {{"variance-sweep", "--samples", "10000"}, "variance-sweep.csv"},
      {{"fit"}, "fit.csv"},
      {{"simulate", "--samples", "100"}, "simulate.tsv"},
  };
  for (const auto& [args, file] : suites) {
    std::string first;
    for (const char* run : {"a", "b"}) {
      const fs::path dir = root / run;
      fs::remove_all(dir);
      fs::create_directories(dir);
      auto full = args;
      full.insert(full.end(), {"--seed", "5", "--out", dir.string()});
      c.expect(call(full) == kExitPass, args.front() + ": exit code");
      const std::string text = slurp(dir / file);
      c.expect(!text.empty(), args.front() + ": no output");
      if (first.empty()) first = text;
      else c.expect(text == first, args.front() + ": output differs between runs");
    }
  }
  c.expect(call({"examples", "--inject-fault", "two-step-outcome"}) == kExitDiagnostic, "fault did not exit 1");
  c.expect(call({"no-such-suite"}) == kExitConfig, "unknown suite did not exit 2");
  c.expect(call({"theorems", "--env", (root / "missing.json").string()}) == kExitConfig, "missing file did not exit 2");
  c.expect(call({"fit", "--ladder", "100,10"}) == kExitConfig, "bad ladder did not exit 2");
  fs::remove_all(root);
  return c;
}

}  // namespace

int main() {
  const std::vector<std::tuple<int, std::string, double, std::function<Check()>>> criteria{
      {1, "recommender example", 1.0, recommender},
      {2, "two-step example", 1.0, two_step},
      {3, "look-ahead bias identity on the random family", 30.0, look_ahead_bias},
      {4, "variance decomposition and geometric bound", 60.0, variance_growth},
      {5, "martingale property and corrupted-row detection", 0.0, martingale},
      {6, "mitigated kernels", 0.0, mitigations},
      {7, "growth-rate separation and recovery", 0.0, growth_rates},
      {8, "fitted kernels converge", 120.0, fitted_convergence},
      {9, "Monte-Carlo coverage and seeding", 0.0, monte_carlo},
      {10, "command-line reproducibility and exit codes", 0.0, cli_contract},
  };
  int failed = 0;
  for (const auto& [id, name, budget, fn] : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Check c;
    try {
      c = fn();
    } catch (const std::exception& e) {
      c.ok = false;
      c.detail = std::string("threw: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (budget > 0.0 && secs > budget) c.expect(false, "took " + format_number(secs, 3) + " s, budget " +
                                                           format_number(budget, 3) + " s");
    std::printf("%s criterion %2d  %-50s %8.3f s%s%s\n", c.ok ? "PASS" : "FAIL", id, name.c_str(), secs,
                c.ok ? "" : "  ", c.detail.c_str());
    failed += c.ok ? 0 : 1;
  }
  std::printf("%d of %zu criteria failed\n", failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
