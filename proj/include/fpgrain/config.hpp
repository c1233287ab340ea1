#pragma once

// INI run configuration:
//
//   [grid]          dim, n
//   [coefficients]  D, pi, phi (expressions) or D_table, pi_table, phi_table (CSV), beta
//   [initial]       f0 or f0_table, mu, Lambda, mass
//   [run]           T_final, dt, stepper, mobility, dt_safety, diag_every, snapshot_every,
//                   time_steps, picard_tol, picard_max_iter, windows, C_gauss, safety
//   [tolerances]    newton_tol, max_newton_iter, bisection_rel, envelope_tol, y_tol
//
// Table paths are resolved relative to the config file.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "fpgrain/coeff.hpp"
#include "fpgrain/errors.hpp"
#include "fpgrain/fvsolver.hpp"
#include "fpgrain/picard.hpp"

namespace fpgrain {

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct RunConfig {
  ProblemSpec spec;
  FVConfig fv;
  PicardOptions picard;
  std::optional<long long> windows;  ///< overrides the number of global windows
  std::optional<double> mass;        ///< equilibrium mass; default: mass of f0
  std::string text;                  ///< verbatim config source
  std::filesystem::path path;
};

namespace detail {

inline const std::set<std::string>& allowed_keys(const std::string& section) {
  static const std::map<std::string, std::set<std::string>> keys{
      {"grid", {"dim", "n"}},
      {"coefficients", {"D", "pi", "phi", "D_table", "pi_table", "phi_table", "beta"}},
      {"initial", {"f0", "f0_table", "mu", "Lambda", "mass"}},
      {"run",
       {"T_final", "dt", "stepper", "mobility", "dt_safety", "diag_every", "snapshot_every",
        "time_steps", "picard_tol", "picard_max_iter", "windows", "C_gauss", "safety"}},
      {"tolerances", {"newton_tol", "max_newton_iter", "bisection_rel", "envelope_tol", "y_tol"}},
  };
  auto it = keys.find(section);
  if (it == keys.end()) throw ConfigError("config: unknown section [" + section + "]");
  return it->second;
}

template <class T>
T get_value(const boost::property_tree::ptree& pt, const std::string& key) {
  try {
    return pt.get<T>(key);
  } catch (const boost::property_tree::ptree_error&) {
    throw ConfigError("config: bad value for " + key + ": '" + pt.get<std::string>(key, "") + "'");
  }
}

template <class T>
std::optional<T> get_opt(const boost::property_tree::ptree& pt, const std::string& key) {
  if (!pt.get_child_optional(key)) return std::nullopt;
  return get_value<T>(pt, key);
}

}  // namespace detail

inline RunConfig parse_config(const std::string& text, const std::filesystem::path& path = {}) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream is(text);
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config: " + std::string(e.message()) + " at line " + std::to_string(e.line()));
  }
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw ConfigError("config: key '" + section + "' outside any section");
    const auto& allowed = detail::allowed_keys(section);
    for (const auto& kv : body)
      if (!allowed.count(kv.first))
        throw ConfigError("config: unknown key '" + kv.first + "' in [" + section + "]");
  }

  RunConfig rc;
  rc.text = text;
  rc.path = path;
  const auto base = path.empty() ? std::filesystem::path(".") : path.parent_path();
  ProblemSpec& s = rc.spec;
  s.dim = detail::get_opt<int>(tree, "grid.dim").value_or(1);
  s.n = detail::get_opt<int>(tree, "grid.n").value_or(64);
  TorusGrid grid;
  try {
    grid = TorusGrid(s.dim, s.n);
  } catch (const Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }

  auto coefficient = [&](const std::string& sec, const std::string& name, const char* fallback) {
    const auto expr = detail::get_opt<std::string>(tree, sec + "." + name);
    const auto table = detail::get_opt<std::string>(tree, sec + "." + name + "_table");
    if (expr && table) throw ConfigError("config: give either " + name + " or " + name + "_table");
    try {
      if (table) {
        const auto p = (base / *table).string();
        return CoefficientInput::from_table(read_field_csv(p, grid), p);
      }
      if (!expr && !fallback) throw ConfigError("config: missing " + sec + "." + name);
      return CoefficientInput::from_expr(expr ? *expr : std::string(fallback), s.dim);
    } catch (const ParseError& e) {
      throw ConfigError("config: " + name + ": " + e.what());
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError("config: " + name + ": " + e.what());
    }
  };
  s.D = coefficient("coefficients", "D", "1");
  s.pi = coefficient("coefficients", "pi", "1");
  s.phi = coefficient("coefficients", "phi", "0");
  s.f0 = coefficient("initial", "f0", nullptr);
  s.beta_declared = detail::get_opt<double>(tree, "coefficients.beta").value_or(0.5);
  s.mu = detail::get_opt<double>(tree, "initial.mu");
  s.Lambda = detail::get_opt<double>(tree, "initial.Lambda");
  rc.mass = detail::get_opt<double>(tree, "initial.mass");
  s.T_final = detail::get_opt<double>(tree, "run.T_final").value_or(1.0);

  FVConfig& fv = rc.fv;
  fv.dt = detail::get_opt<double>(tree, "run.dt");
  if (const auto st = detail::get_opt<std::string>(tree, "run.stepper")) {
    if (*st == "implicit")
      fv.stepper = Stepper::implicit_euler;
    else if (*st == "explicit")
      fv.stepper = Stepper::explicit_euler;
    else
      throw ConfigError("config: stepper must be implicit or explicit");
  }
  if (const auto mb = detail::get_opt<std::string>(tree, "run.mobility")) {
    if (*mb == "log_mean")
      fv.mobility = Mobility::log_mean;
    else if (*mb == "upwind")
      fv.mobility = Mobility::upwind;
    else
      throw ConfigError("config: mobility must be log_mean or upwind");
  }
  fv.dt_safety = detail::get_opt<double>(tree, "run.dt_safety").value_or(fv.dt_safety);
  fv.diag_every = detail::get_opt<int>(tree, "run.diag_every").value_or(fv.diag_every);
  fv.snapshot_every = detail::get_opt<int>(tree, "run.snapshot_every").value_or(fv.snapshot_every);
  fv.newton_tol = detail::get_opt<double>(tree, "tolerances.newton_tol").value_or(fv.newton_tol);
  fv.max_newton_iter =
      detail::get_opt<int>(tree, "tolerances.max_newton_iter").value_or(fv.max_newton_iter);
  fv.envelope_tol = detail::get_opt<double>(tree, "tolerances.envelope_tol").value_or(fv.envelope_tol);
  s.tol.newton_tol = fv.newton_tol;
  s.tol.max_newton_iter = fv.max_newton_iter;
  s.tol.envelope_abs = fv.envelope_tol;
  s.tol.bisection_rel =
      detail::get_opt<double>(tree, "tolerances.bisection_rel").value_or(s.tol.bisection_rel);

  PicardOptions& po = rc.picard;
  po.time_steps = detail::get_opt<int>(tree, "run.time_steps").value_or(po.time_steps);
  po.tol = detail::get_opt<double>(tree, "run.picard_tol").value_or(po.tol);
  po.max_iter = detail::get_opt<int>(tree, "run.picard_max_iter").value_or(po.max_iter);
  po.y_tol = detail::get_opt<double>(tree, "tolerances.y_tol").value_or(po.y_tol);
  po.safety = detail::get_opt<double>(tree, "run.safety").value_or(po.safety);
  po.C_gauss = detail::get_opt<double>(tree, "run.C_gauss");
  po.mu = s.mu;
  po.Lambda = s.Lambda;
  s.tol.picard_tol = po.tol;
  s.tol.picard_max_iter = po.max_iter;
  s.tol.y_tol = po.y_tol;
  s.tol.time_safety = po.safety;
  rc.windows = detail::get_opt<long long>(tree, "run.windows");

  try {
    s.validate();
    fv.validate();
  } catch (const PreconditionError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (po.time_steps < 1) throw ConfigError("config: time_steps must be >= 1");
  if (!(po.safety > 0.0 && po.safety <= 1.0)) throw ConfigError("config: safety must lie in (0, 1]");
  if (rc.windows && *rc.windows < 1) throw ConfigError("config: windows must be >= 1");
  return rc;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return parse_config(os.str(), path);
}

}  // namespace fpgrain
