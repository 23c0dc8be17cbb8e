#ifndef CTRLSIM_IO_HPP
#define CTRLSIM_IO_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "ctrlsim/env_core.hpp"
#include "ctrlsim/fixtures.hpp"
#include "ctrlsim/labeling.hpp"
#include "ctrlsim/simulators.hpp"

namespace ctrlsim {

// ---------------------------------------------------------------------------
// Environment files
//
// {
//   "user_alphabet": [...], "agent_alphabet": [...], "horizon": T,
//   "user_dynamics": { "<history>": { "<user>": p, ... }, ... },
//   "policies": { "<tag>": { "<pre-action state>": { "<action>": p } } },
//   "labelers": { "<name>": { "kind": "post_hoc" | "step_wise" | "a_priori", ... } },
//   "behavior": "<tag>", "evaluation": "<tag>", "labeler": "<name>"      (optional)
// }
//
// History keys are comma-joined symbol names; "" is the empty history.

struct EnvironmentFile {
  EnvironmentSpec spec;
  std::map<std::string, AgentPolicy> policies;
  std::map<std::string, PostHocLabeler> post_hoc;
  std::map<std::string, StepwiseLabeler> step_wise;
  std::map<std::string, AprioriControl> a_priori;
  std::string behavior = "pi_b";
  std::string evaluation = "pi_e";
  std::string labeler;
};

namespace detail {

using nlohmann::json;

inline const json& member(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) fail(ErrorKind::parse, where + ": missing field '" + key + "'");
  return obj.at(key);
}

inline Alphabet read_alphabet(const json& j, const std::string& where) {
  if (!j.is_array()) fail(ErrorKind::parse, where + " must be an array of names");
  std::vector<std::string> names;
  for (const auto& v : j) {
    if (!v.is_string()) fail(ErrorKind::parse, where + " must contain strings");
    names.push_back(v.get<std::string>());
  }
  try {
    return Alphabet(std::move(names));
  } catch (const Error& e) {
    fail(ErrorKind::parse, where + ": " + e.what());
  }
}

inline Distribution read_row(const json& j, const Alphabet& symbols, const std::string& where) {
  if (!j.is_object()) fail(ErrorKind::parse, where + " must map symbols to probabilities");
  Distribution row(symbols.size(), 0.0);
  for (const auto& [name, p] : j.items()) {
    if (!p.is_number()) fail(ErrorKind::parse, where + ": probability of '" + name + "' is not a number");
    const auto s = symbols.find(name);
    if (!s) fail(ErrorKind::parse, where + ": unknown symbol '" + name + "'");
    row[*s] = p.get<double>();
  }
  return row;
}

inline SeqMap<Distribution> read_table(const json& j, const Alphabet& users, const Alphabet& agents,
                                       const Alphabet& symbols, const std::string& where) {
  if (!j.is_object()) fail(ErrorKind::parse, where + " must be an object keyed by history");
  SeqMap<Distribution> out;
  for (const auto& [key, row] : j.items()) {
    History h;
    try {
      h = parse_history(users, agents, key);
    } catch (const Error& e) {
      fail(ErrorKind::parse, where + ": bad history key '" + key + "': " + e.what());
    }
    out.emplace(h.symbols(), read_row(row, symbols, where + "[\"" + key + "\"]"));
  }
  return out;
}

inline json write_row(const Distribution& row, const Alphabet& symbols) {
  json out = json::object();
  for (std::size_t i = 0; i < row.size(); ++i)
    if (row[i] != 0.0) out[symbols.name(static_cast<Symbol>(i))] = row[i];
  return out;
}

inline json write_table(const SeqMap<Distribution>& table, const Alphabet& users, const Alphabet& agents,
                        const Alphabet& symbols) {
  // json objects keep keys sorted, so output order is deterministic
  json out = json::object();
  for (const auto& [key, row] : table) out[format_history(users, agents, key)] = write_row(row, symbols);
  return out;
}

}  // namespace detail

/// Parses and validates an environment document. Every problem surfaces as
/// an Error; malformed JSON is ErrorKind::parse.
inline EnvironmentFile read_environment(const nlohmann::json& doc) {
  using detail::member;
  EnvironmentFile f;
  const Alphabet users = detail::read_alphabet(member(doc, "user_alphabet", "environment"), "user_alphabet");
  const Alphabet agents = detail::read_alphabet(member(doc, "agent_alphabet", "environment"), "agent_alphabet");
  const auto& horizon = member(doc, "horizon", "environment");
  if (!horizon.is_number_integer() || horizon.get<long long>() < 1)
    fail(ErrorKind::parse, "horizon must be a positive integer");
  f.spec = EnvironmentSpec{users, agents, horizon.get<std::size_t>(), {}};
  f.spec.user_dynamics = detail::read_table(member(doc, "user_dynamics", "environment"), users, agents, users,
                                            "user_dynamics");
  validate_environment(f.spec);

  if (doc.contains("policies")) {
    const auto& ps = doc.at("policies");
    if (!ps.is_object()) fail(ErrorKind::parse, "policies must be an object");
    for (const auto& [tag, table] : ps.items()) {
      AgentPolicy p{tag, detail::read_table(table, users, agents, agents, "policies." + tag)};
      validate_policy(f.spec, p);
      f.policies.emplace(tag, std::move(p));
    }
  }
  if (doc.contains("labelers")) {
    const auto& ls = doc.at("labelers");
    if (!ls.is_object()) fail(ErrorKind::parse, "labelers must be an object");
    for (const auto& [name, l] : ls.items()) {
      const std::string where = "labelers." + name;
      const auto& kind = member(l, "kind", where);
      if (!kind.is_string()) fail(ErrorKind::parse, where + ".kind must be a string");
      const std::string k = kind.get<std::string>();
      const Alphabet controls = detail::read_alphabet(member(l, "controls", where), where + ".controls");
      if (k == "post_hoc") {
        PostHocLabeler p{name, controls, detail::read_table(member(l, "table", where), users, agents, controls, where)};
        raise_issues(check_labeler(p), "invalid labeler '" + name + "'");
        f.post_hoc.emplace(name, std::move(p));
      } else if (k == "step_wise") {
        StepwiseLabeler p{name, controls, detail::read_table(member(l, "table", where), users, agents, controls, where)};
        raise_issues(check_labeler(p), "invalid labeler '" + name + "'");
        f.step_wise.emplace(name, std::move(p));
      } else if (k == "a_priori") {
        AprioriControl a{name, controls, detail::read_row(member(l, "prior", where), controls, where + ".prior"), {}};
        const auto& dyn = member(l, "dynamics", where);
        for (const auto& z : controls.names()) {
          EnvironmentSpec env{users, agents, f.spec.horizon, {}};
          env.user_dynamics = detail::read_table(member(dyn, z.c_str(), where + ".dynamics"), users, agents, users,
                                                 where + ".dynamics." + z);
          a.dynamics.push_back(std::move(env));
        }
        raise_issues(check_apriori(a), "invalid a-priori control '" + name + "'");
        f.a_priori.emplace(name, std::move(a));
      } else {
        fail(ErrorKind::parse, where + ": unknown kind '" + k + "'");
      }
    }
  }
  for (const char* role : {"behavior", "evaluation", "labeler"}) {
    if (!doc.contains(role)) continue;
    if (!doc.at(role).is_string()) fail(ErrorKind::parse, std::string(role) + " must name an entry");
    const std::string v = doc.at(role).get<std::string>();
    (std::string(role) == "behavior" ? f.behavior : std::string(role) == "evaluation" ? f.evaluation : f.labeler) = v;
  }
  if (f.labeler.empty() && !f.post_hoc.empty()) f.labeler = f.post_hoc.begin()->first;
  return f;
}

inline EnvironmentFile read_environment_text(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, std::string("malformed JSON: ") + e.what());
  }
  try {
    return read_environment(doc);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, std::string("unexpected JSON value: ") + e.what());
  }
}

inline EnvironmentFile read_environment_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::parse, "cannot open environment file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return read_environment_text(ss.str());
}

inline nlohmann::json write_environment(const EnvironmentFile& f) {
  using nlohmann::json;
  const auto& users = f.spec.users;
  const auto& agents = f.spec.agents;
  json doc;
  doc["user_alphabet"] = users.names();
  doc["agent_alphabet"] = agents.names();
  doc["horizon"] = f.spec.horizon;
  doc["user_dynamics"] = detail::write_table(f.spec.user_dynamics, users, agents, users);
  doc["policies"] = json::object();
  for (const auto& [tag, p] : f.policies) doc["policies"][tag] = detail::write_table(p.action_table, users, agents, agents);
  doc["labelers"] = json::object();
  for (const auto& [name, l] : f.post_hoc)
    doc["labelers"][name] = {{"kind", "post_hoc"}, {"controls", l.controls.names()},
                             {"table", detail::write_table(l.table, users, agents, l.controls)}};
  for (const auto& [name, l] : f.step_wise)
    doc["labelers"][name] = {{"kind", "step_wise"}, {"controls", l.controls.names()},
                             {"table", detail::write_table(l.table, users, agents, l.controls)}};
  for (const auto& [name, a] : f.a_priori) {
    json dyn = json::object();
    for (std::size_t z = 0; z < a.dynamics.size(); ++z)
      dyn[a.controls.name(static_cast<Symbol>(z))] = detail::write_table(a.dynamics[z].user_dynamics, users, agents, users);
    doc["labelers"][name] = {{"kind", "a_priori"}, {"controls", a.controls.names()},
                             {"prior", detail::write_row(a.prior, a.controls)}, {"dynamics", dyn}};
  }
  doc["behavior"] = f.behavior;
  doc["evaluation"] = f.evaluation;
  doc["labeler"] = f.labeler;
  return doc;
}

inline EnvironmentFile environment_file(const Fixture& fx) {
  EnvironmentFile f;
  f.spec = fx.spec;
  f.policies.emplace(fx.behavior.tag, fx.behavior);
  f.policies.emplace(fx.evaluation.tag, fx.evaluation);
  for (const auto& p : fx.extra_policies) f.policies.emplace(p.tag, p);
  f.post_hoc.emplace(fx.labeler.name, fx.labeler);
  if (fx.stepwise) f.step_wise.emplace(fx.stepwise->name, *fx.stepwise);
  f.behavior = fx.behavior.tag;
  f.evaluation = fx.evaluation.tag;
  f.labeler = fx.labeler.name;
  return f;
}

/// The fixture view of a file: named behavior, evaluation and post-hoc labeler,
/// the first step-wise labeler, and a memoryless parameterized user.
inline Fixture fixture_from_file(const EnvironmentFile& f, const std::string& name) {
  auto policy = [&](const std::string& tag) -> const AgentPolicy& {
    auto it = f.policies.find(tag);
    if (it == f.policies.end()) fail(ErrorKind::unknown_policy, "environment has no policy '" + tag + "'");
    return it->second;
  };
  auto labeler = f.post_hoc.find(f.labeler);
  if (labeler == f.post_hoc.end()) fail(ErrorKind::parse, "environment has no post-hoc labeler '" + f.labeler + "'");
  Fixture fx{name, f.spec, policy(f.behavior), policy(f.evaluation), labeler->second, {}, {}, {}};
  if (!f.step_wise.empty()) fx.stepwise = f.step_wise.begin()->second;
  fx.dynamics = lift_environment(f.spec);
  for (const auto& [tag, p] : f.policies)
    if (tag != f.behavior && tag != f.evaluation) fx.extra_policies.push_back(p);
  return fx;
}

/// Built-in name or path to a JSON file.
inline Fixture load_fixture(const std::string& source) {
  for (const auto& n : builtin_fixture_names())
    if (n == source) return builtin_fixture(source);
  return fixture_from_file(read_environment_file(source), std::filesystem::path(source).stem().string());
}

// ---------------------------------------------------------------------------
// Kernel dump

inline nlohmann::json kernel_to_json(const SimulatorKernel& k) {
  using nlohmann::json;
  json doc;
  doc["kind"] = std::string(to_string(k.kind));
  doc["users"] = k.users.names();
  doc["agents"] = k.agents.names();
  doc["horizon"] = k.horizon;
  if (k.has_global_control()) {
    doc["controls"] = k.controls.names();
    json priors = json::object();
    for (std::size_t i = 0; i < k.priors.size(); ++i) {
      const std::string tag = k.kind == KernelKind::policy_conditioned ? k.policy_tags.at(i) : "";
      priors[tag] = detail::write_row(k.priors[i], k.controls);
    }
    doc["priors"] = priors;
  } else {
    doc["step_controls"] = k.step_controls.names();
  }
  if (!k.policy_tags.empty()) doc["policy_tags"] = k.policy_tags;
  json rows = json::object();
  for (const auto& r : k.sorted_rows()) {
    json row = json::array();
    for (double p : *r.probabilities) row.push_back(p);
    rows[r.context] = row;
  }
  doc["rows"] = rows;
  return doc;
}

// ---------------------------------------------------------------------------
// CSV reports

enum class Outcome { pass, fail, info };

inline std::string_view to_string(Outcome o) {
  switch (o) {
    case Outcome::pass: return "pass";
    case Outcome::fail: return "fail";
    case Outcome::info: return "info";
  }
  return "info";
}

struct ReportRow {
  std::string diagnostic;
  std::string environment;
  std::string kernel;
  std::string policy_pair;
  std::string control;
  std::size_t steps = 0;
  double value = 0.0;
  std::optional<double> bound;
  std::optional<double> tolerance;
  Outcome outcome = Outcome::info;
  std::size_t order = 0;  // not printed; orders rows whose control labels do not sort numerically

  auto sort_key() const { return std::tie(diagnostic, environment, kernel, policy_pair, order, control, steps); }
};

inline constexpr const char* kCsvHeader = "diagnostic,environment,kernel,policy_pair,control,T,value,bound,tolerance,pass";

inline std::string format_number(double v, int digits = 12) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (v == 0.0) v = 0.0;  // drop the sign of negative zero
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

/// Rows sorted on their identifying columns, numbers at 12 significant digits, LF endings.
inline std::string format_csv(std::vector<ReportRow> rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& l, const ReportRow& r) { return l.sort_key() < r.sort_key(); });
  std::string out = kCsvHeader;
  out += '\n';
  for (const auto& r : rows) {
    out += detail::csv_field(r.diagnostic) + ',' + detail::csv_field(r.environment) + ',' + detail::csv_field(r.kernel) +
           ',' + detail::csv_field(r.policy_pair) + ',' + detail::csv_field(r.control) + ',' + std::to_string(r.steps) +
           ',' + format_number(r.value) + ',' + (r.bound ? format_number(*r.bound) : "") + ',' +
           (r.tolerance ? format_number(*r.tolerance) : "") + ',' + std::string(to_string(r.outcome)) + '\n';
  }
  return out;
}

}  // namespace ctrlsim

#endif  // CTRLSIM_IO_HPP
