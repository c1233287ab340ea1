#pragma once

// Finite-volume solver for d_t f = div((f/pi) grad(D log f + phi)).
//
// Face flux J = m(f_i, f_j) (1/pi)_face (mu_j - mu_i)/h with mu the chemical
// potential. The default mobility m is the logarithmic mean of the two cell
// values; the upwind choice (cell the potential jump drains) is available.
// Either way fluxes vanish at the discrete equilibrium, mass is conserved by
// telescoping, and implicit Euler dissipates the free energy because F is
// convex and every face contributes -m (1/pi) (d mu)^2 / h^2 <= 0.

#include <Eigen/Sparse>
#include <Eigen/SparseLU>
#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fpgrain/coeff.hpp"
#include "fpgrain/equilibrium.hpp"
#include "fpgrain/errors.hpp"
#include "fpgrain/grid.hpp"
#include "fpgrain/kernel.hpp"

namespace fpgrain {

enum class Stepper { explicit_euler, implicit_euler };
enum class Mobility { log_mean, upwind };

struct FVConfig {
  double dt_safety = 0.9;
  Stepper stepper = Stepper::implicit_euler;
  Mobility mobility = Mobility::log_mean;
  int max_newton_iter = 50;
  double newton_tol = 1e-13;  ///< relative to max(1, sup f)
  int diag_every = 1;
  int snapshot_every = 0;  ///< 0: initial and final frames only
  std::optional<double> dt;  ///< overrides stable_dt
  double dt_min = 1e-12;
  double envelope_tol = 1e-6;  ///< plus h^2
  std::size_t max_warnings = 20;

  void validate() const {
    if (!(dt_safety > 0.0 && dt_safety <= 1.0))
      throw PreconditionError("FVConfig: dt_safety must lie in (0, 1]");
    if (!(newton_tol > 0.0)) throw PreconditionError("FVConfig: newton_tol must be positive");
    if (diag_every < 1) throw PreconditionError("FVConfig: diag_every must be >= 1");
    if (max_newton_iter < 1) throw PreconditionError("FVConfig: max_newton_iter must be >= 1");
    if (dt && !(*dt > 0.0)) throw PreconditionError("FVConfig: dt must be positive");
  }
};

struct DiagnosticsRow {
  double t = 0.0;
  double mass = 0.0;
  double free_energy = 0.0;
  double dissipation_rate = 0.0;
  double dF_dt_numeric = 0.0;
  double min_f = 0.0;
  double max_f = 0.0;
  double linf_to_feq = 0.0;
};

inline const char* diagnostics_header() {
  return "t,mass,free_energy,dissipation_rate,dF_dt_numeric,min_f,max_f,linf_to_feq";
}

namespace detail {

// d/dq of expm1(q)/q and expm1(q)/q minus that.
inline double phi1(double q) {
  if (std::abs(q) < 1e-4) return 0.5 + q * (1.0 / 3.0 + q * (1.0 / 8.0 + q / 30.0));
  return (q * std::exp(q) - std::expm1(q)) / (q * q);
}
inline double phi2(double q) {
  if (std::abs(q) < 1e-4) return 0.5 + q * (1.0 / 6.0 + q * (1.0 / 24.0 + q / 120.0));
  return (std::expm1(q) - q) / (q * q);
}

/// Flux divergence of f (cell values) with the given face data.
inline std::vector<double> flux_divergence(const TorusGrid& g, const std::vector<double>& f,
                                           const std::vector<double>& mu,
                                           const FaceCoefficients& fc, Mobility mob) {
  std::vector<double> div(g.size(), 0.0);
  const double invh = 1.0 / g.h();
  for (int a = 0; a < g.dim(); ++a) {
    const auto& ip = fc.inv_pi.component(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t j = g.shift(i, a, 1);
      const double dmu = mu[j] - mu[i];
      double m;
      if (mob == Mobility::log_mean)
        m = log_mean(f[i], f[j]);
      else
        m = dmu > 0.0 ? f[j] : f[i];
      const double J = m * ip[i] * dmu * invh;
      div[i] += J * invh;
      div[j] -= J * invh;
    }
  }
  return div;
}

}  // namespace detail

/// div J(f) at time t.
inline Field fv_rhs(const Field& f, const CoefficientSet& c, double t = 0.0,
                    Mobility mob = Mobility::log_mean) {
  const Field mu = chemical_potential(f, c);
  return Field(c.grid(), detail::flux_divergence(c.grid(), f.values(), mu.values(), c.faces(t), mob));
}

/// Step-size rule: explicit h^2 / (2 d max(D/pi) + h max|grad phi / pi|),
/// implicit h, both times dt_safety.
inline double stable_dt(const Field& f, const CoefficientSet& c, double t, const FVConfig& cfg) {
  detail::require_positive(f, "stable_dt");
  const double h = c.grid().h();
  if (cfg.stepper == Stepper::implicit_euler) return cfg.dt_safety * h;
  const Field p = c.pi(t);
  double a = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) a = std::max(a, c.D()[i] / p[i]);
  const double drift = c.faces(t).drift.sup_norm();
  return cfg.dt_safety * h * h / (2.0 * c.grid().dim() * a + h * drift);
}

namespace detail {

struct NewtonOutcome {
  std::vector<double> f;
  int iterations = 0;
  double residual = 0.0;
};

inline NewtonOutcome implicit_solve(const CoefficientSet& c, const std::vector<double>& f_old,
                                    const FaceCoefficients& fc, double dt, const FVConfig& cfg) {
  const TorusGrid& g = c.grid();
  const std::size_t N = g.size();
  const double invh = 1.0 / g.h();
  const Field& D = c.D();
  const Field& phi = c.phi();
  const double scale = std::max(1.0, *std::max_element(f_old.begin(), f_old.end()));
  const double tol = cfg.newton_tol * scale;

  std::vector<double> u(N), f = f_old, mu(N);
  for (std::size_t i = 0; i < N; ++i) u[i] = std::log(f_old[i]);

  auto residual = [&](const std::vector<double>& ff, const std::vector<double>& uu,
                      std::vector<double>& mm) {
    for (std::size_t i = 0; i < N; ++i) mm[i] = D[i] * uu[i] + phi[i];
    const auto div = flux_divergence(g, ff, mm, fc, cfg.mobility);
    std::vector<double> r(N);
    for (std::size_t i = 0; i < N; ++i) r[i] = ff[i] - f_old[i] - dt * div[i];
    return r;
  };
  auto sup = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
  };

  std::vector<double> r = residual(f, u, mu);
  double rn = sup(r);
  NewtonOutcome out;
  Eigen::SparseLU<SparseMatrix> lu;
  bool pattern = false;
  int it = 0;
  for (; it < cfg.max_newton_iter && rn > tol; ++it) {
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(N * (1 + 4 * static_cast<std::size_t>(g.dim())));
    for (std::size_t i = 0; i < N; ++i)
      trip.emplace_back(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i), f[i]);
    for (int a = 0; a < g.dim(); ++a) {
      const auto& ip = fc.inv_pi.component(a);
      for (std::size_t i = 0; i < N; ++i) {
        const std::size_t j = g.shift(i, a, 1);
        const double dmu = mu[j] - mu[i];
        double m, dm_di, dm_dj;
        if (cfg.mobility == Mobility::log_mean) {
          const double q = u[j] - u[i];
          m = log_mean(f[i], f[j]);
          dm_dj = f[i] * phi1(q);
          dm_di = f[i] * phi2(q);
        } else if (dmu > 0.0) {
          m = f[j];
          dm_dj = f[j];
          dm_di = 0.0;
        } else {
          m = f[i];
          dm_di = f[i];
          dm_dj = 0.0;
        }
        // J = m ip dmu / h; residual_i -= dt J/h, residual_j += dt J/h
        const double k = ip[i] * invh;
        const double dJ_di = k * (dm_di * dmu - m * D[i]);
        const double dJ_dj = k * (dm_dj * dmu + m * D[j]);
        const auto ii = static_cast<Eigen::Index>(i), jj = static_cast<Eigen::Index>(j);
        const double w = dt * invh;
        trip.emplace_back(ii, ii, -w * dJ_di);
        trip.emplace_back(ii, jj, -w * dJ_dj);
        trip.emplace_back(jj, ii, w * dJ_di);
        trip.emplace_back(jj, jj, w * dJ_dj);
      }
    }
    const auto NN = static_cast<Eigen::Index>(N);
    SparseMatrix Jm(NN, NN);
    Jm.setFromTriplets(trip.begin(), trip.end());
    Jm.makeCompressed();
    if (!pattern) {
      lu.analyzePattern(Jm);
      pattern = true;
    }
    lu.factorize(Jm);
    if (lu.info() != Eigen::Success) throw NumericalError("fv_step: singular Newton matrix");
    const Eigen::VectorXd du =
        lu.solve(-Eigen::Map<const Eigen::VectorXd>(r.data(), NN));

    // Damped update: halve until the residual decreases.
    double lambda = 1.0;
    bool accepted = false;
    std::vector<double> u_new(N), f_new(N), mu_new(N), r_new;
    for (int ls = 0; ls < 40; ++ls) {
      bool finite = true;
      for (std::size_t i = 0; i < N; ++i) {
        u_new[i] = u[i] + lambda * du[static_cast<Eigen::Index>(i)];
        f_new[i] = std::exp(u_new[i]);
        finite = finite && std::isfinite(f_new[i]) && f_new[i] > 0.0;
      }
      if (finite) {
        r_new = residual(f_new, u_new, mu_new);
        const double rn_new = sup(r_new);
        if (rn_new < rn || rn_new <= tol) {
          accepted = true;
          u.swap(u_new);
          f.swap(f_new);
          mu.swap(mu_new);
          r.swap(r_new);
          rn = rn_new;
          break;
        }
      }
      lambda *= 0.5;
    }
    if (!accepted) break;  // stagnated at roundoff
  }
  if (rn > tol && rn > 1e3 * tol)
    throw NumericalError("fv_step: Newton did not converge (residual " + format_double(rn) + ")");
  out.f = std::move(f);
  out.iterations = it;
  out.residual = rn;
  return out;
}

}  // namespace detail

/// One time step from t to t + dt. The returned field is the conservative
/// update f + dt div J(f*), with f* the Newton iterate (implicit) or f itself
/// (explicit), so mass is preserved to rounding.
inline Field fv_step(const Field& f, const CoefficientSet& c, double t, double dt,
                     const FVConfig& cfg, const FaceCoefficients* faces = nullptr) {
  require_same_grid(f.grid(), c.grid(), "fv_step");
  detail::require_positive(f, "fv_step");
  if (!(dt > 0.0)) throw PreconditionError("fv_step: dt must be positive");
  const TorusGrid& g = c.grid();
  const std::vector<double>& fo = f.values();

  if (cfg.stepper == Stepper::explicit_euler) {
    // Positivity loss halves the step and retries with substeps.
    std::vector<double> cur = fo;
    double remaining = dt, tt = t, h_step = dt;
    while (remaining > 0.0) {
      const double step = std::min(h_step, remaining);
      const FaceCoefficients fc = faces ? *faces : c.faces(tt);
      std::vector<double> mu(cur.size());
      for (std::size_t i = 0; i < cur.size(); ++i)
        mu[i] = c.D()[i] * std::log(cur[i]) + c.phi()[i];
      const auto div = detail::flux_divergence(g, cur, mu, fc, cfg.mobility);
      std::vector<double> nxt(cur.size());
      bool positive = true;
      for (std::size_t i = 0; i < cur.size(); ++i) {
        nxt[i] = cur[i] + step * div[i];
        positive = positive && nxt[i] > 0.0;
      }
      if (!positive) {
        h_step *= 0.5;
        if (h_step < cfg.dt_min) throw NumericalError("fv_step: positivity lost below dt_min");
        continue;
      }
      cur.swap(nxt);
      remaining -= step;
      tt += step;
      if (remaining < 1e-15 * dt) break;
    }
    return Field(g, std::move(cur));
  }

  const FaceCoefficients fc = faces ? *faces : c.faces(t + dt);
  const auto nw = detail::implicit_solve(c, fo, fc, dt, cfg);
  std::vector<double> mu(fo.size());
  for (std::size_t i = 0; i < fo.size(); ++i) mu[i] = c.D()[i] * std::log(nw.f[i]) + c.phi()[i];
  const auto div = detail::flux_divergence(g, nw.f, mu, fc, cfg.mobility);
  std::vector<double> out(fo.size());
  for (std::size_t i = 0; i < fo.size(); ++i) out[i] = fo[i] + dt * div[i];
  if (*std::min_element(out.begin(), out.end()) <= 0.0)
    throw NumericalError("fv_step: conservative update lost positivity");
  return Field(g, std::move(out));
}

struct SimulationResult {
  Trajectory snapshots;
  std::vector<DiagnosticsRow> diagnostics;
  std::vector<std::string> warnings;
  std::size_t envelope_violations = 0;
  double max_energy_increase = -std::numeric_limits<double>::infinity();
  double max_mass_drift = 0.0;
  long long steps = 0;
  double dt = 0.0;
  EquilibriumState equilibrium;
  AprioriBounds bounds;
};

/// March from f0 to T_final with uniform steps.
inline SimulationResult simulate(const CoefficientSet& c, const Field& f0, double T_final,
                                 const FVConfig& cfg) {
  cfg.validate();
  require_same_grid(f0.grid(), c.grid(), "simulate");
  detail::require_positive(f0, "simulate");
  if (!(T_final > 0.0)) throw PreconditionError("simulate: T_final must be positive");
  const TorusGrid& g = c.grid();

  SimulationResult res;
  res.equilibrium = equilibrium_state(c, integrate(f0));
  res.bounds = apriori_bounds(f0, res.equilibrium, c);
  const double env_tol = cfg.envelope_tol + g.h() * g.h();

  const double dt_rule = cfg.dt ? *cfg.dt : stable_dt(f0, c, 0.0, cfg);
  const long long nsteps = std::max<long long>(1, static_cast<long long>(std::ceil(T_final / dt_rule - 1e-9)));
  const double dt = T_final / static_cast<double>(nsteps);
  res.dt = dt;

  std::optional<FaceCoefficients> static_faces;
  if (c.time_independent_pi()) static_faces = c.faces(0.0);

  const double mass0 = integrate(f0);
  auto row_for = [&](double t, const Field& f) {
    DiagnosticsRow r;
    r.t = t;
    r.mass = integrate(f);
    r.free_energy = free_energy(f, c);
    r.dissipation_rate = dissipation_rate(f, c, t);
    r.min_f = f.min();
    r.max_f = f.max();
    r.linf_to_feq = sup_norm(f - res.equilibrium.f_eq);
    return r;
  };
  auto check_envelope = [&](double t, const Field& f) {
    for (std::size_t i = 0; i < f.size(); ++i) {
      const bool low = f[i] < res.bounds.lower_env[i] - env_tol;
      const bool high = f[i] > res.bounds.upper_env[i] + env_tol;
      if (!low && !high) continue;
      ++res.envelope_violations;
      if (res.warnings.size() < cfg.max_warnings) {
        const auto x = g.coords(i);
        std::string loc = format_double(x[0]);
        if (g.dim() == 2) loc += "," + format_double(x[1]);
        res.warnings.push_back(std::string(low ? "below lower" : "above upper") +
                               " a priori envelope at t=" + format_double(t) + ", x=(" + loc +
                               "), f=" + format_double(f[i]));
      }
    }
  };

  res.snapshots = Trajectory(g);
  res.snapshots.push_back(0.0, f0);
  res.diagnostics.push_back(row_for(0.0, f0));
  Field f = f0;
  double F_prev = res.diagnostics.front().free_energy;
  for (long long k = 1; k <= nsteps; ++k) {
    const double t = (k - 1) * dt;
    const FaceCoefficients* fc = nullptr;
    if (static_faces) fc = &*static_faces;
    f = fv_step(f, c, t, dt, cfg, fc);
    const double tn = k == nsteps ? T_final : k * dt;
    const double F = free_energy(f, c);
    res.max_energy_increase = std::max(res.max_energy_increase, F - F_prev);
    F_prev = F;
    res.max_mass_drift = std::max(res.max_mass_drift, std::abs(integrate(f) - mass0));
    check_envelope(tn, f);
    if (k % cfg.diag_every == 0 || k == nsteps) res.diagnostics.push_back(row_for(tn, f));
    if ((cfg.snapshot_every > 0 && k % cfg.snapshot_every == 0) || k == nsteps)
      res.snapshots.push_back(tn, f);
  }
  res.steps = nsteps;

  auto& rows = res.diagnostics;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const std::size_t a = r == 0 ? 0 : r - 1;
    const std::size_t b = r + 1 < rows.size() ? r + 1 : r;
    if (a == b) continue;
    rows[r].dF_dt_numeric = (rows[b].free_energy - rows[a].free_energy) / (rows[b].t - rows[a].t);
  }
  return res;
}

inline SimulationResult simulate(const ProblemSpec& spec, const FVConfig& cfg) {
  const CoefficientSet c = build_coefficients(spec);
  const Field f0 = spec.initial_field();
  const AssumptionReport ar =
      validate_assumptions(c, f0, spec.resolved_mu(f0), spec.resolved_Lambda(f0));
  if (const auto* bad = ar.first_failure()) throw AssumptionError(bad->id, bad->detail);
  return simulate(c, f0, spec.T_final, cfg);
}

}  // namespace fpgrain
