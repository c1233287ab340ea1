// fpgrain: command-line front end.
//
//   fpgrain <simulate|equilibrium|bounds|picard|global|kernel-validate|sweep>
//           --config PATH [--out DIR] [--seed N] [--quiet]
//
// Exit codes: 0 ok, 1 usage or I/O, 2 assumption failure, 3 numerical failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fpgrain/fpgrain.hpp"

namespace fs = std::filesystem;
using namespace fpgrain;

namespace {

constexpr int kOk = 0, kUsage = 1, kAssumption = 2, kNumerical = 3;

struct Globals {
  std::string config;
  std::string out = "fpgrain_out";
  std::uint64_t seed = 0;
  bool quiet = false;
};

struct RunContext {
  RunConfig rc;
  fs::path out;
  std::uint64_t seed = 0;
  bool quiet = false;
  std::string command;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  std::ofstream open(const std::string& name) const {
    std::ofstream os(out / name);
    if (!os) throw ConfigError("cannot write " + (out / name).string());
    return os;
  }
  /// CSV file whose first line records the seed.
  std::ofstream csv(const std::string& name) const {
    auto os = open(name);
    os << "# seed=" << seed << '\n';
    return os;
  }
  void info(const std::string& line) const {
    if (!quiet) std::cerr << line << '\n';
  }
};

std::string fmt(double v) { return format_double(v); }

RunContext prepare(const Globals& g, const std::string& command, const std::string& config,
                   const fs::path& out) {
  RunContext ctx;
  ctx.rc = load_config(config);
  ctx.out = out;
  ctx.seed = g.seed;
  ctx.quiet = g.quiet;
  ctx.command = command;
  std::error_code ec;
  fs::create_directories(ctx.out, ec);
  if (ec) throw ConfigError("cannot create output directory " + ctx.out.string());
  ctx.open("config.ini") << ctx.rc.text;
  return ctx;
}

void write_manifest(const RunContext& ctx, const nlohmann::json& extra = {}) {
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx.start).count();
  nlohmann::json j;
  j["tool"] = "fpgrain";
  j["version"] = kVersion;
  j["command"] = ctx.command;
  j["seed"] = ctx.seed;
  j["config"] = fs::absolute(ctx.rc.path).string();
  j["grid"] = {{"dim", ctx.rc.spec.dim}, {"n", ctx.rc.spec.n}};
  j["wall_time_s"] = wall;
  if (!extra.is_null()) j["results"] = extra;
  ctx.open("manifest.json") << j.dump(2) << '\n';
}

std::string snapshot_name(const std::string& stem, std::size_t k) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%05zu.csv", stem.c_str(), k);
  return buf;
}

void write_snapshots(const RunContext& ctx, const Trajectory& tr, const std::string& stem) {
  for (std::size_t k = 0; k < tr.size(); ++k)
    write_field_csv((ctx.out / snapshot_name(stem, k)).string(), tr.frame(k),
                    "seed=" + std::to_string(ctx.seed) + " t=" + fmt(tr.time(k)));
}

struct Problem {
  CoefficientSet c;
  Field f0;
  double mu, Lambda;
};

Problem load_problem(const RunContext& ctx, bool require_assumptions) {
  const ProblemSpec& s = ctx.rc.spec;
  CoefficientSet c = build_coefficients(s);
  Field f0 = s.initial_field();
  const double mu = s.resolved_mu(f0), Lambda = s.resolved_Lambda(f0);
  const AssumptionReport ar = validate_assumptions(c, f0, mu, Lambda);
  for (const auto& chk : ar.checks)
    ctx.info(chk.id + (chk.passed ? " pass: " : " FAIL: ") + chk.detail);
  if (require_assumptions)
    if (const auto* bad = ar.first_failure()) throw AssumptionError(bad->id, bad->detail);
  return Problem{std::move(c), std::move(f0), mu, Lambda};
}

// ---------------------------------------------------------------------------

int cmd_simulate(const RunContext& ctx) {
  const Problem p = load_problem(ctx, true);
  const SimulationResult r = simulate(p.c, p.f0, ctx.rc.spec.T_final, ctx.rc.fv);
  auto os = ctx.csv("diagnostics.csv");
  os << diagnostics_header() << '\n';
  for (const auto& d : r.diagnostics)
    os << fmt(d.t) << ',' << fmt(d.mass) << ',' << fmt(d.free_energy) << ','
       << fmt(d.dissipation_rate) << ',' << fmt(d.dF_dt_numeric) << ',' << fmt(d.min_f) << ','
       << fmt(d.max_f) << ',' << fmt(d.linf_to_feq) << '\n';
  write_snapshots(ctx, r.snapshots, "snapshot");
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
  write_manifest(ctx, {{"steps", r.steps},
                       {"dt", r.dt},
                       {"max_mass_drift", r.max_mass_drift},
                       {"max_energy_increase", r.max_energy_increase},
                       {"envelope_violations", r.envelope_violations}});
  return kOk;
}

int cmd_equilibrium(const RunContext& ctx) {
  const Problem p = load_problem(ctx, false);
  const double mass = ctx.rc.mass.value_or(integrate(p.f0));
  const EquilibriumState eq = equilibrium_state(p.c, mass, ctx.rc.spec.tol.bisection_rel);
  const double F = free_energy(eq.f_eq, p.c);
  write_field_csv((ctx.out / "feq.csv").string(), eq.f_eq, "seed=" + std::to_string(ctx.seed));
  const std::string header = "C_eq,mass,min_feq,max_feq,free_energy";
  const std::string row = fmt(eq.C_eq) + ',' + fmt(mass) + ',' + fmt(eq.f_eq.min()) + ',' +
                          fmt(eq.f_eq.max()) + ',' + fmt(F);
  ctx.csv("summary.csv") << header << '\n' << row << '\n';
  std::cout << header << '\n' << row << '\n';
  write_manifest(ctx, {{"C_eq", eq.C_eq}});
  return kOk;
}

int cmd_bounds(const RunContext& ctx) {
  const Problem p = load_problem(ctx, true);
  PicardOptions po = ctx.rc.picard;
  const PicardSpace space = make_picard_space(p.f0, p.c, po);
  const GlobalPlan plan = make_global_plan(p.f0, p.c, ctx.rc.spec.T_final, po, ctx.rc.windows);
  const std::string header =
      "m,M,R,R_prime,gamma,T,T_prime,mu,f0_norm,C_gauss,V_norm,W_inf,W_sup,safety,T_used,"
      "T_prime_used,windows";
  std::ostringstream row;
  row << fmt(plan.m) << ',' << fmt(plan.M) << ',' << fmt(space.R) << ',' << fmt(plan.R_prime)
      << ',' << fmt(plan.gamma) << ',' << fmt(space.T_raw) << ',' << fmt(plan.T_prime_raw) << ','
      << fmt(space.mu) << ',' << fmt(space.f0_norm) << ',' << fmt(space.C_gauss) << ','
      << fmt(space.V_norm) << ',' << fmt(space.W_inf) << ',' << fmt(space.W_sup) << ','
      << fmt(space.safety) << ',' << fmt(space.T) << ',' << fmt(plan.T_prime) << ','
      << plan.num_windows;
  ctx.csv("bounds.csv") << header << '\n' << row.str() << '\n';
  std::cout << header << '\n' << row.str() << '\n';
  if (!space.C_gauss_used) ctx.info("note: V = 0, so C_gauss does not enter T");
  write_manifest(ctx, {{"T", space.T_raw}, {"T_prime", plan.T_prime_raw}});
  return kOk;
}

int cmd_picard(const RunContext& ctx, int pairs) {
  const Problem p = load_problem(ctx, true);
  const PicardOptions& po = ctx.rc.picard;
  const PicardSpace space = make_picard_space(p.f0, p.c, po);
  DuhamelMap psi(p.c);
  auto [traj, rep] = fixed_point_solve(p.f0, psi, space, po.tol, po.max_iter, po);

  auto it = ctx.csv("iterations.csv");
  it << "iteration,residual,ratio,min_f,max_f\n";
  for (std::size_t k = 0; k < rep.iterate_min.size(); ++k) {
    const double res = k < rep.residuals.size() ? rep.residuals[k] : 0.0;
    double ratio = 0.0;
    if (k >= 1 && k < rep.residuals.size() && rep.residuals[k - 1] > 0.0)
      ratio = rep.residuals[k] / rep.residuals[k - 1];
    it << k + 1 << ',' << fmt(res) << ',' << fmt(ratio) << ',' << fmt(rep.iterate_min[k]) << ','
       << fmt(rep.iterate_max[k]) << '\n';
  }
  const int every = std::max(1, ctx.rc.fv.snapshot_every);
  Trajectory kept(traj.grid());
  for (std::size_t k = 0; k < traj.size(); ++k)
    if (k % static_cast<std::size_t>(every) == 0 || k + 1 == traj.size())
      kept.push_back(traj.time(k), traj.frame(k));
  write_snapshots(ctx, kept, "picard");

  double worst = 0.0;
  if (pairs > 0) {
    auto cs = ctx.csv("contraction.csv");
    cs << "pair,ratio\n";
    for (int k = 0; k < pairs; ++k) {
      const auto a = random_y_element(p.c.grid(), traj.times(), space.lower, space.R,
                                      ctx.seed * 1000003ULL + 2ULL * static_cast<unsigned>(k));
      const auto b = random_y_element(p.c.grid(), traj.times(), space.lower, space.R,
                                      ctx.seed * 1000003ULL + 2ULL * static_cast<unsigned>(k) + 1);
      const double r = contraction_ratio(a, b, p.f0, psi, space, po.y_tol);
      worst = std::max(worst, r);
      cs << k << ',' << fmt(r) << '\n';
    }
  }
  ctx.info("picard: " + std::to_string(rep.iterations) + " iterations, residual " +
           fmt(rep.final_residual) + ", T = " + fmt(space.T));
  write_manifest(ctx, {{"iterations", rep.iterations},
                       {"final_residual", rep.final_residual},
                       {"empirical_contraction", rep.empirical_contraction},
                       {"max_pair_ratio", worst},
                       {"T", space.T},
                       {"in_Y_every_iterate", rep.in_Y_every_iterate}});
  return kOk;
}

int cmd_global(const RunContext& ctx) {
  const Problem p = load_problem(ctx, true);
  GlobalOptions go;
  go.picard = ctx.rc.picard;
  go.windows = ctx.rc.windows;
  const GlobalResult r = global_solve(p.f0, p.c, ctx.rc.spec.T_final, go);
  auto os = ctx.csv("windows.csv");
  os << "window,t,min_f,max_f\n";
  for (std::size_t k = 0; k < r.seams.size(); ++k)
    os << k << ',' << fmt(r.seams.time(k)) << ',' << fmt(r.seams.frame(k).min()) << ','
       << fmt(r.seams.frame(k).max()) << '\n';
  // Seam snapshots at a stride keeping at most about 100 files.
  const std::size_t stride = std::max<std::size_t>(1, r.seams.size() / 100);
  Trajectory kept(r.seams.grid());
  for (std::size_t k = 0; k < r.seams.size(); ++k)
    if (k % stride == 0 || k + 1 == r.seams.size()) kept.push_back(r.seams.time(k), r.seams.frame(k));
  write_snapshots(ctx, kept, "seam");
  write_manifest(ctx, {{"windows", r.plan.num_windows},
                       {"T_prime", r.plan.T_prime},
                       {"m", r.plan.m},
                       {"M", r.plan.M},
                       {"min_f", r.min_f},
                       {"max_f", r.max_f},
                       {"seams_bit_identical", r.seams_bit_identical}});
  return kOk;
}

int cmd_kernel_validate(const RunContext& ctx) {
  const Problem p = load_problem(ctx, true);
  const CoefficientSet& c = p.c;
  auto os = ctx.csv("kernel_report.csv");
  os << "check,value1,value2,residual,passed\n";
  bool all = true;
  auto row = [&](const std::string& name, double v1, double v2, double res, bool ok) {
    os << name << ',' << fmt(v1) << ',' << fmt(v2) << ',' << fmt(res) << ',' << (ok ? 1 : 0)
       << '\n';
    all = all && ok;
    ctx.info(name + (ok ? " pass" : " FAIL"));
  };

  const double dt_ladder = c.time_independent_pi() ? 1e-5 : 1e-3;
  const auto ladder = propagator_ladder(c, {0.001, 0.002, 0.004, 0.008}, dt_ladder);
  const GaussianFit fit = validate_gaussian_bounds(ladder, {0, 0}, &c);
  row("gaussian_fit_C_c", fit.C_fit, fit.c_fit, fit.max_residual,
      std::isfinite(fit.C_fit) && fit.c_fit > 0.0 && fit.max_residual <= 1e-12);
  const GaussianFit fit1 = validate_gaussian_bounds(ladder, {0, 1}, &c);
  row("gaussian_fit_grad_C_c", fit1.C_fit, fit1.c_fit, fit1.max_residual,
      std::isfinite(fit1.C_fit) && fit1.c_fit > 0.0 && fit1.max_residual <= 1e-12);

  const double min_entry = std::min_element(ladder.begin(), ladder.end(), [](auto& a, auto& b) {
                             return a.min_entry < b.min_entry;
                           })->min_entry;
  row("positivity_min_entry", min_entry, 0.0, 0.0, min_entry >= -1e-10);

  const StepSolver steps(c);
  const Propagator P = build_propagator(steps, 0.0, 0.1, 100);
  const MassSandwichReport ms = validate_mass_sandwich(P, c);
  row("mass_sandwich", ms.min_row_mass, ms.max_row_mass, ms.violation, ms.passed);

  bool rejected = false;
  try {
    const auto longP = build_propagator(steps, 0.0, 1.5, 150);
    (void)validate_gaussian_bounds(longP, {0, 0}, &c);
  } catch (const PreconditionError&) {
    rejected = true;
  }
  row("long_time_rejected", rejected ? 1.0 : 0.0, 0.0, 0.0, rejected);

  const IntegralBoundsReport ib =
      validate_integral_bounds(c, c.grid(), IntegralBoundsOptions{}.times);
  row("integral_C1", ib.coarse.C1, ib.fine.C1, ib.drift[0], ib.drift[0] <= 2.0);
  row("integral_C2", ib.coarse.C2, ib.fine.C2, ib.drift[1], ib.drift[1] <= 2.0);
  row("integral_C3", ib.coarse.C3, ib.fine.C3, ib.drift[2], ib.drift[2] <= 2.0);

  write_manifest(ctx, {{"all_passed", all}});
  return all ? kOk : kNumerical;
}

int run_one(const Globals& g, const std::string& command, const std::string& config,
            const fs::path& out, int pairs) {
  const RunContext ctx = prepare(g, command, config, out);
  if (command == "simulate") return cmd_simulate(ctx);
  if (command == "equilibrium") return cmd_equilibrium(ctx);
  if (command == "bounds") return cmd_bounds(ctx);
  if (command == "picard") return cmd_picard(ctx, pairs);
  if (command == "global") return cmd_global(ctx);
  if (command == "kernel-validate") return cmd_kernel_validate(ctx);
  throw ConfigError("unknown command " + command);
}

int report(const std::string& kind, int code, const std::string& msg) {
  std::cerr << "error: kind=" << kind << " code=" << code << " message=" << msg << '\n';
  return code;
}

/// Runs the command and maps library errors onto exit codes.
int guarded(const std::function<int()>& fn) {
  try {
    return fn();
  } catch (const AssumptionError& e) {
    return report("assumption", kAssumption, std::string(e.what()));
  } catch (const ConfigError& e) {
    return report("usage", kUsage, e.what());
  } catch (const ParseError& e) {
    return report("usage", kUsage, e.what());
  } catch (const NumericalError& e) {
    return report("numerical", kNumerical, e.what());
  } catch (const EvalError& e) {
    return report("numerical", kNumerical, e.what());
  } catch (const PreconditionError& e) {
    return report("numerical", kNumerical, e.what());
  } catch (const fs::filesystem_error& e) {
    return report("io", kUsage, e.what());
  } catch (const std::exception& e) {
    return report("numerical", kNumerical, e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nonlinear Fokker-Planck grain-growth toolkit"};
  app.require_subcommand(1);
  Globals g;
  auto add_globals = [&](CLI::App* sub) {
    sub->add_option("--config", g.config, "INI configuration file")->required();
    sub->add_option("--out", g.out, "output directory");
    sub->add_option("--seed", g.seed, "random seed recorded in every output");
    sub->add_flag("--quiet", g.quiet, "suppress progress messages");
  };

  const std::vector<std::pair<std::string, std::string>> commands{
      {"simulate", "finite-volume run with diagnostics"},
      {"equilibrium", "Gibbs state for the configured mass"},
      {"bounds", "assumption bounds and local existence time"},
      {"global", "windowed fixed-point solve to T_final"},
      {"kernel-validate", "Gaussian bound check for the propagator"}};
  std::vector<CLI::App*> subs;
  for (const auto& [name, about] : commands) {
    auto* s = app.add_subcommand(name, about);
    add_globals(s);
    subs.push_back(s);
  }

  auto* picard = app.add_subcommand("picard", "fixed-point solve on [0, T]");
  add_globals(picard);
  int pairs = 5;
  double tol = -1.0;
  int max_iter = -1;
  long long windows = -1;
  picard->add_option("--tol", tol, "Picard tolerance");
  picard->add_option("--max-iter", max_iter, "Picard iteration cap");
  picard->add_option("--windows", windows, "window count for the global solve");
  picard->add_option("--pairs", pairs, "random pairs for the contraction estimate");

  auto* sweep = app.add_subcommand("sweep", "run one subcommand on several configs in parallel");
  std::vector<std::string> configs;
  int jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  std::string sweep_cmd = "simulate";
  sweep->add_option("--configs", configs, "configuration files")->required();
  sweep->add_option("--out", g.out, "output directory (one subdirectory per config)");
  sweep->add_option("--seed", g.seed, "random seed");
  sweep->add_option("--jobs", jobs, "worker threads");
  sweep->add_option("--command", sweep_cmd, "subcommand run for each config");
  sweep->add_flag("--quiet", g.quiet, "suppress progress messages");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  if (*sweep) {
    std::atomic<std::size_t> next{0};
    std::atomic<int> worst{kOk};
    std::mutex io;
    auto worker = [&] {
      for (std::size_t k = next++; k < configs.size(); k = next++) {
        const fs::path out = fs::path(g.out) / fs::path(configs[k]).stem();
        const int rc = guarded([&] { return run_one(g, sweep_cmd, configs[k], out, 0); });
        std::lock_guard<std::mutex> lock(io);
        if (!g.quiet) std::cerr << configs[k] << ": exit " << rc << '\n';
        int cur = worst.load();
        while (rc > cur && !worst.compare_exchange_weak(cur, rc)) {
        }
      }
    };
    std::vector<std::thread> pool;
    for (int j = 0; j < std::max(1, jobs); ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    return worst.load();
  }

  for (auto* s : subs)
    if (*s) return guarded([&] { return run_one(g, s->get_name(), g.config, g.out, 0); });

  return guarded([&] {
    RunContext ctx = prepare(g, "picard", g.config, g.out);
    if (tol > 0.0) ctx.rc.picard.tol = tol;
    if (max_iter > 0) ctx.rc.picard.max_iter = max_iter;
    if (windows > 0) ctx.rc.windows = windows;
    return cmd_picard(ctx, pairs);
  });
}
