// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fpgrain/fpgrain.hpp"
#include "parser_suite.hpp"

using namespace fpgrain;
using std::numbers::pi;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

Field cosine_data(const TorusGrid& g, double base, double amp) {
  return Field::sample(g, [&](Point x) { return base + amp * std::cos(2 * pi * x[0]); });
}

CoefficientSet cosine_problem(int n) { return build_coefficients(TorusGrid(1, n), "1", "1", "cos(2*pi*x1)"); }
CoefficientSet cosine_D(int n) { return build_coefficients(TorusGrid(1, n), "2 + cos(2*pi*x1)", "1", "0"); }
CoefficientSet heat(int n) { return build_coefficients(TorusGrid(1, n), "1", "1", "0"); }

FVConfig fixed_dt(double dt, int diag_every = 1 << 30) {
  FVConfig cfg;
  cfg.dt = dt;
  cfg.diag_every = diag_every;
  return cfg;
}

// Independent oracle for C_eq of the cosine problem: -log of the mean of
// exp(-cos 2 pi x), by the trapezoid rule (spectrally accurate for periodic
// integrands) at a resolution far above any solver grid.
double c_eq_oracle() {
  const int N = 1 << 14;
  double s = 0.0;
  for (int k = 0; k < N; ++k) s += std::exp(-std::cos(2 * pi * k / N));
  return -std::log(s / N);
}

Outcome conservation() {
  const auto c = cosine_problem(128);
  const auto r = simulate(c, Field(c.grid(), 1.0), 1.0, fixed_dt(1e-4));
  return {r.steps == 10000 && r.max_mass_drift <= 1e-10,
          "steps=" + std::to_string(r.steps) + " max|mass drift|=" + num(r.max_mass_drift)};
}

Outcome dissipation() {
  const auto c128 = cosine_problem(128);
  const auto coarse = simulate(c128, Field(c128.grid(), 1.0), 1.0, fixed_dt(1e-4));
  const auto c = cosine_problem(256);
  const auto r = simulate(c, Field(c.grid(), 1.0), 1.0, fixed_dt(1e-4, 10));
  double worst = 0.0;
  for (std::size_t k = 1; k + 1 < r.diagnostics.size(); ++k) {
    const auto& d = r.diagnostics[k];
    worst = std::max(worst, std::abs(d.dF_dt_numeric + d.dissipation_rate) / std::max(d.dissipation_rate, 1e-8));
  }
  const double inc = std::max(coarse.max_energy_increase, r.max_energy_increase);
  return {inc <= 1e-12 && worst <= 0.05,
          "max per-step dF=" + num(inc) + " max rel |dF/dt + D|=" + num(worst)};
}

Outcome equilibrium() {
  const auto c = cosine_problem(128);
  const auto eq = equilibrium_state(c, 1.0);
  const double oracle = c_eq_oracle();
  const auto r = simulate(c, Field(c.grid(), 1.0), 10.0, fixed_dt(1e-3, 100));
  const double terminal = sup_norm(r.snapshots.back() - eq.f_eq);
  const auto wb = simulate(c, eq.f_eq, 1.0, fixed_dt(1e-3));
  const double drift = sup_norm(wb.snapshots.back() - eq.f_eq);
  const bool ok = std::abs(eq.C_eq - (-0.23597)) <= 1e-4 && std::abs(eq.C_eq - oracle) <= 1e-6 &&
                  terminal <= 1e-5 && wb.steps == 1000 && drift <= 1e-12;
  return {ok, "C_eq=" + format_double(eq.C_eq) + " oracle=" + format_double(oracle) +
                  " |f(10)-feq|=" + num(terminal) + " well-balanced drift=" + num(drift)};
}

Outcome apriori() {
  const auto c = cosine_problem(128);
  const auto r = simulate(c, Field(c.grid(), 1.0), 10.0, fixed_dt(1e-3, 1));
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& d : r.diagnostics) {
    lo = std::min(lo, d.min_f);
    hi = std::max(hi, d.max_f);
  }
  const double m = r.bounds.m, M = r.bounds.M;
  const bool ok = std::abs(m - std::exp(-2.0)) <= 1e-6 && std::abs(M - std::exp(2.0)) <= 1e-4 &&
                  lo >= m - 1e-4 && hi <= M + 1e-4;
  return {ok, "m=" + format_double(m) + " M=" + format_double(M) + " trajectory in [" + num(lo) + ", " +
                  num(hi) + "]"};
}

Outcome time_bound_check() {
  // mu = 1, |f0| = 1, V = 0, W = 0, through the library and through a problem setup
  const double T = time_bound(1.0, 1.0, 1.0, 0.0, 0.0, 0.0);
  const auto c = heat(32);
  PicardOptions opt;
  opt.mu = 1.0;
  const auto s = make_picard_space(Field(c.grid(), 4.0), c, opt);
  bool mono = true;
  double prev = INFINITY;
  for (double V : {0.0, 0.5, 1.0, 2.0, 4.0}) {
    const double t = time_bound(1.0, 1.0, 1.0, V, 0.0, 0.0);
    mono = mono && t <= prev;
    prev = t;
  }
  prev = INFINITY;
  for (double w : {0.0, 0.5, 1.0, 2.0, 4.0}) {
    const double t = time_bound(1.0, 1.0, 1.0, 0.0, -w, w);
    mono = mono && t <= prev;
    prev = t;
  }
  const bool ok = T == 0.25 && s.T_raw == 0.25 && format_double(s.T_raw) == "0.25" && mono;
  return {ok, "T=" + format_double(T) + " printed=" + format_double(s.T_raw) +
                  " monotone=" + (mono ? "yes" : "no")};
}

Outcome contraction() {
  const auto c = cosine_D(128);
  const Field f0 = cosine_data(c.grid(), 1.0, 0.25);
  const auto s = make_picard_space(f0, c);
  const DuhamelMap psi(c);
  const auto times = detail::uniform_lattice(0.0, s.T, 16);
  double worst = 0.0;
  for (std::uint64_t k = 0; k < 20; ++k) {
    const auto f = random_y_element(c.grid(), times, s.mu, s.R, 1000 + 2 * k);
    const auto g = random_y_element(c.grid(), times, s.mu, s.R, 1001 + 2 * k);
    worst = std::max(worst, contraction_ratio(f, g, f0, psi, s));
  }
  const auto [traj, rep] = fixed_point_solve(f0, psi, s, 1e-12, 60);
  // Same problem on a window 2e5 times longer, where the iteration has
  // several steps above the rounding floor.
  PicardSpace wide = s;
  wide.T = 1e-3;
  const auto [traj2, rep2] = fixed_point_solve(f0, psi, wide, 1e-12, 60);
  const bool ok = worst <= 0.55 && rep.empirical_contraction <= 0.55 && rep2.empirical_contraction <= 0.55;
  return {ok, "T=" + num(s.T) + " max pair ratio=" + num(worst) + " iteration rate=" +
                  num(rep.empirical_contraction) + " (T=1e-3: " + num(rep2.empirical_contraction) + " over " +
                  std::to_string(rep2.iterations) + " iterations)"};
}

double picard_vs_fv(const CoefficientSet& c, const Field& f0, const PicardSpace& s, int steps) {
  PicardOptions opt;
  opt.time_steps = steps;
  const auto [traj, rep] = fixed_point_solve(f0, c, s, 1e-12, 80, opt);
  const auto fv = simulate(c, f0, s.T, fixed_dt(s.T / steps));
  return sup_norm(traj.back() - fv.snapshots.back());
}

Outcome oracle_equivalence() {
  const auto c = cosine_D(128);
  const Field f0 = cosine_data(c.grid(), 1.0, 0.25);
  const auto s = make_picard_space(f0, c);
  const double tool = picard_vs_fv(c, f0, s, 64);
  PicardSpace wide = s;
  wide.T = 0.01;
  const double longer = picard_vs_fv(c, f0, wide, 400);
  return {tool <= 1e-3 && longer <= 1e-3,
          "T=" + num(s.T) + " sup diff=" + num(tool) + " (T=0.01: " + num(longer) + ")"};
}

Outcome continuity() {
  const auto c = cosine_D(128);
  const Field f0 = cosine_data(c.grid(), 1.0, 0.25);
  PicardOptions opt;
  opt.mu = (f0.min() - 1e-3) / 4.0;  // admits every perturbed datum
  const auto s = make_picard_space(f0, c, opt);
  const DuhamelMap psi(c);
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> N(0.0, 1.0);
  double worst = 0.0;
  for (int k = 0; k < 10; ++k) {
    std::vector<double> d(c.grid().size());
    for (auto& v : d) v = N(rng);
    Field dir(c.grid(), d);
    dir = dir * (1e-3 / sup_norm(dir));
    worst = std::max(worst, continuity_check(f0, f0 + dir, psi, s, opt));
  }
  return {worst <= 4.0, "max ratio=" + num(worst)};
}

Outcome global() {
  const auto c = cosine_problem(128);
  const Field f0(c.grid(), 1.0);
  GlobalOptions opt;
  opt.picard.time_steps = 8;
  const auto r = global_solve(f0, c, 10.0, opt);
  const auto eq = equilibrium_state(c, 1.0);
  const long long needed = static_cast<long long>(std::ceil(10.0 / r.plan.T_prime - 1e-9));
  const double terminal = sup_norm(r.seams.back() - eq.f_eq);
  const bool ok = r.plan.num_windows >= needed && r.seams_bit_identical &&
                  r.min_f >= r.plan.m - 1e-4 && r.max_f <= r.plan.M + 1e-4 &&
                  std::abs(r.plan.m - std::exp(-2.0)) <= 1e-6 && std::abs(r.plan.M - std::exp(2.0)) <= 1e-4;
  return {ok, "windows=" + std::to_string(r.plan.num_windows) + " (ceil(10/T')=" + std::to_string(needed) +
                  ") seams bit-identical=" + (r.seams_bit_identical ? "yes" : "no") + " f in [" +
                  num(r.min_f) + ", " + num(r.max_f) + "] |f(10)-feq|=" + num(terminal)};
}

Outcome kernel_suite() {
  const auto c = heat(128);
  const auto ladder = propagator_ladder(c, {0.001, 0.002, 0.004, 0.008}, 1e-5);
  const auto fit = validate_gaussian_bounds(ladder, {0, 0}, &c);

  const auto cc = build_coefficients(TorusGrid(1, 128), "1", "1", "cos(2*pi*x1)/(4*pi^2)");
  const auto ms = validate_mass_sandwich(build_propagator(cc, cc.grid(), 0.0, 0.1, 100), cc);

  bool stable = true;
  std::string drifts;
  for (const char* phi : {"0", "cos(2*pi*x1)/(4*pi^2)"}) {
    const auto coarse = build_coefficients(TorusGrid(1, 64), "1", "1", phi);
    const auto ib = validate_integral_bounds(coarse, coarse.grid(), IntegralBoundsOptions{}.times);
    stable = stable && ib.stable();
    for (double d : ib.drift) drifts += num(d) + " ";
  }

  bool rejected = false;
  try {
    validate_gaussian_bounds(build_propagator(c, c.grid(), 0.0, 1.5, 150), {0, 0}, &c);
  } catch (const PreconditionError&) {
    rejected = true;
  }
  const bool ok = fit.c_fit >= 0.24 && fit.C_fit <= 0.30 && ms.passed && ms.violation <= 1e-6 && stable && rejected;
  return {ok, "c_fit=" + num(fit.c_fit) + " C_fit=" + num(fit.C_fit) + " sandwich violation=" +
                  num(ms.violation) + " integral drift ratios " + drifts + "long time rejected=" +
                  (rejected ? "yes" : "no")};
}

Outcome analytic() {
  // Fourier mode, both solvers, n = 256 and steps well below 1e-4.
  const auto c = heat(256);
  const Field f0 = cosine_data(c.grid(), 1.0, 0.5);
  const double T = 0.05;
  auto exact = [&](double t) { return cosine_data(c.grid(), 1.0, 0.5 * std::exp(-4 * pi * pi * t)); };
  FVConfig cfg = fixed_dt(5e-6);
  cfg.snapshot_every = 1000;
  const auto fv = simulate(c, f0, T, cfg);
  double fv_err = 0.0;
  for (std::size_t k = 0; k < fv.snapshots.size(); ++k)
    fv_err = std::max(fv_err, sup_norm(fv.snapshots.frame(k) - exact(fv.snapshots.time(k))));
  GlobalOptions go;
  go.picard.time_steps = 256;
  const auto pg = global_solve(f0, c, T, go);
  double pc_err = 0.0;
  for (std::size_t k = 0; k < pg.seams.size(); ++k)
    pc_err = std::max(pc_err, sup_norm(pg.seams.frame(k) - exact(pg.seams.time(k))));

  // Constants with phi = 0 (constant D, varying pi).
  const auto cs = build_coefficients(TorusGrid(1, 64), "1.5", "1 + 0.4*sin(2*pi*x1)", "0");
  const Field k0(cs.grid(), 2.0);
  const auto fvc = simulate(cs, k0, 0.5, fixed_dt(1e-3));
  GlobalOptions gc;
  gc.picard.time_steps = 8;
  const auto pcc = global_solve(k0, cs, 0.05, gc);
  const double c_fv = sup_norm(fvc.snapshots.back() - k0), c_pc = sup_norm(pcc.seams.back() - k0);
  const bool ok = fv_err <= 1e-4 && pc_err <= 1e-4 && c_fv <= 1e-8 && c_pc <= 1e-8;
  return {ok, "mode error fv=" + num(fv_err) + " picard=" + num(pc_err) + "; constant drift fv=" + num(c_fv) +
                  " picard=" + num(c_pc)};
}

Outcome parser() {
  std::size_t round = 0, prec = 0, errs = 0;
  const double p[2] = {0.3, 0.7};
  for (const auto& src : parser_suite::corpus()) {
    const Expr e = parse_expr(src);
    const Expr again = parse_expr(to_string(e));
    if (structurally_equal(e, again) && to_string(again) == to_string(e) &&
        eval_expr(e, p, 0.2) == eval_expr(again, p, 0.2))
      ++round;
  }
  for (const auto& c : parser_suite::precedence())
    if (eval_expr(parse_expr(c.src), p, 0.0) == c.value) ++prec;
  for (const auto& c : parser_suite::error_cases()) {
    try {
      parse_expr(c.src, c.dim);
    } catch (const ParseError& e) {
      if (e.kind() == c.kind && e.offset() == c.offset) ++errs;
    }
  }
  const auto& C = parser_suite::corpus();
  const bool ok = C.size() == 50 && round == C.size() && prec == parser_suite::precedence().size() &&
                  errs == parser_suite::error_cases().size();
  return {ok, "round-trip " + std::to_string(round) + "/" + std::to_string(C.size()) + ", precedence " +
                  std::to_string(prec) + "/" + std::to_string(parser_suite::precedence().size()) +
                  ", error offsets " + std::to_string(errs) + "/" + std::to_string(parser_suite::error_cases().size())};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"conservation", conservation},
      {"energy dissipation", dissipation},
      {"equilibrium", equilibrium},
      {"a priori bounds", apriori},
      {"time bound", time_bound_check},
      {"contraction", contraction},
      {"oracle equivalence", oracle_equivalence},
      {"continuity", continuity},
      {"global concatenation", global},
      {"kernel suite", kernel_suite},
      {"analytic exactness", analytic},
      {"parser", parser},
  };
  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("[%s] %2zu %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", k + 1, criteria[k].first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
