#pragma once

// Equilibrium state, free energy, dissipation rate and the two-sided a priori
// envelopes.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "fpgrain/coeff.hpp"
#include "fpgrain/errors.hpp"
#include "fpgrain/grid.hpp"

namespace fpgrain {

struct EquilibriumState {
  Field f_eq;
  double C_eq = 0.0;
  double mass = 0.0;
};

struct AprioriBounds {
  double m = 0.0;
  double M = 0.0;
  Field lower_env;
  Field upper_env;
};

namespace detail {

inline void require_positive(const Field& f, const char* where) {
  const std::size_t k = f.argmin();
  if (!(f[k] > 0.0)) {
    const auto x = f.grid().coords(k);
    std::string loc = format_double(x[0]);
    if (f.grid().dim() == 2) loc += "," + format_double(x[1]);
    throw PreconditionError(std::string(where) + ": nonpositive value " + format_double(f[k]) +
                            " at x=(" + loc + ")");
  }
}

/// Logarithmic mean (b - a)/(log b - log a), continuous at a = b.
inline double log_mean(double a, double b) {
  const double q = std::log(b / a);
  if (std::abs(q) < 1e-4) return a * (1.0 + q * (0.5 + q * (1.0 / 6.0 + q / 24.0)));
  return a * std::expm1(q) / q;
}

}  // namespace detail

inline Field gibbs_state(const CoefficientSet& c, double C) {
  const Field& D = c.D();
  const Field& phi = c.phi();
  std::vector<double> f(D.size());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = std::exp(-(phi[i] - C) / D[i]);
  return Field(c.grid(), std::move(f));
}

/// f_eq = exp(-(phi - C_eq)/D) with C_eq fixed by the total mass. C_eq is
/// found by bisection; the mass map is strictly increasing in C.
inline EquilibriumState equilibrium_state(const CoefficientSet& c, double mass,
                                          double rel_tol = 1e-12) {
  if (!(mass > 0.0) || !std::isfinite(mass))
    throw PreconditionError("equilibrium_state: mass must be positive");
  auto g = [&](double C) {
    // Guard against overflow for wide brackets.
    const Field& D = c.D();
    const Field& phi = c.phi();
    double s = 0.0;
    for (std::size_t i = 0; i < D.size(); ++i) {
      const double e = -(phi[i] - C) / D[i];
      if (e > 700.0) return std::numeric_limits<double>::infinity();
      s += std::exp(e);
    }
    return s * c.grid().cell_volume() - mass;
  };

  double lo = -1.0, hi = 1.0;
  int expansions = 0;
  while (g(lo) > 0.0) {
    lo *= 2.0;
    if (++expansions > 200) throw NumericalError("equilibrium_state: bracketing failed");
  }
  while (g(hi) < 0.0) {
    hi *= 2.0;
    if (++expansions > 200) throw NumericalError("equilibrium_state: bracketing failed");
  }

  double C = 0.5 * (lo + hi);
  for (int it = 0; it < 400; ++it) {
    C = 0.5 * (lo + hi);
    const double v = g(C);
    if (std::abs(v) <= rel_tol * mass) break;
    if (v < 0.0)
      lo = C;
    else
      hi = C;
    if (hi - lo <= 4 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(C))) break;
  }
  return EquilibriumState{gibbs_state(c, C), C, mass};
}

/// F[f] = integral of D f (log f - 1) + phi f.
inline double free_energy(const Field& f, const CoefficientSet& c) {
  require_same_grid(f.grid(), c.grid(), "free_energy");
  detail::require_positive(f, "free_energy");
  const Field& D = c.D();
  const Field& phi = c.phi();
  double s = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i)
    s += D[i] * f[i] * (std::log(f[i]) - 1.0) + phi[i] * f[i];
  return s * c.grid().cell_volume();
}

/// D log f + phi.
inline Field chemical_potential(const Field& f, const CoefficientSet& c) {
  require_same_grid(f.grid(), c.grid(), "chemical_potential");
  detail::require_positive(f, "chemical_potential");
  std::vector<double> mu(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) mu[i] = c.D()[i] * std::log(f[i]) + c.phi()[i];
  return Field(c.grid(), std::move(mu));
}

/// Integral of (f/pi)|grad(D log f + phi)|^2, evaluated on faces with the
/// same mobility and potential differences as the finite-volume flux, so
/// the discrete energy balance of the solver is reproduced.
inline double dissipation_rate(const Field& f, const CoefficientSet& c, double time = 0.0) {
  const Field mu = chemical_potential(f, c);
  const FaceCoefficients fc = c.faces(time);
  const TorusGrid& g = c.grid();
  const double invh = 1.0 / g.h();
  double s = 0.0;
  for (int a = 0; a < g.dim(); ++a) {
    const auto& ip = fc.inv_pi.component(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t j = g.shift(i, a, 1);
      const double dmu = (mu[j] - mu[i]) * invh;
      s += detail::log_mean(f[i], f[j]) * ip[i] * dmu * dmu;
    }
  }
  return s * g.cell_volume();
}

/// Envelopes exp(min_y(D log(f0/f_eq))/D(x)) f_eq(x) and the analogue with max.
inline AprioriBounds apriori_bounds(const Field& f0, const EquilibriumState& eq,
                                    const CoefficientSet& c) {
  require_same_grid(f0.grid(), c.grid(), "apriori_bounds");
  detail::require_positive(f0, "apriori_bounds");
  const Field& D = c.D();
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (std::size_t i = 0; i < f0.size(); ++i) {
    const double v = D[i] * std::log(f0[i] / eq.f_eq[i]);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<double> lv(f0.size()), uv(f0.size());
  for (std::size_t i = 0; i < f0.size(); ++i) {
    lv[i] = std::exp(lo / D[i]) * eq.f_eq[i];
    uv[i] = std::exp(hi / D[i]) * eq.f_eq[i];
  }
  Field lower(c.grid(), std::move(lv)), upper(c.grid(), std::move(uv));
  const double m = lower.min(), M = upper.max();
  return AprioriBounds{m, M, std::move(lower), std::move(upper)};
}

}  // namespace fpgrain
