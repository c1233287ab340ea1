#pragma once

// Duhamel fixed-point construction: the set Y, the map Psi, the explicit
// existence time, Picard iteration and the windowed global continuation.
//
// On a window lattice t_0 < ... < t_K the map is the discrete Duhamel sum
//   u_k = S_k (u_{k-1} + dt G_{k-1/2}),   S_k = (I - dt L(t_k - dt/2))^{-1}
//   G_{k-1/2} = div(V (F(f_{k-1}) + F(f_k)) / 2),   F(f) = f log f
// i.e. u_k = P(t_k, t_0) f0 + sum_j dt P(t_k, t_{j-1}) G_{j-1/2}. Moving
// div onto the kernel gives the grad_y K form exactly, because the cell
// divergence is the negative adjoint of the central gradient.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fpgrain/coeff.hpp"
#include "fpgrain/equilibrium.hpp"
#include "fpgrain/errors.hpp"
#include "fpgrain/grid.hpp"
#include "fpgrain/kernel.hpp"

namespace fpgrain {

/// sqrt(T) = min( numer / (2 (C R (2R/gamma + |log gamma| + 1) V + 1)),
///                sqrt(log 2 / (|W_inf| + |W_sup| + 1)) )
inline double time_bound_formula(double numer, double R, double gamma, double C_gauss,
                                 double V_norm, double W_inf, double W_sup) {
  for (double v : {numer, R, gamma, C_gauss, V_norm, W_inf, W_sup})
    if (!std::isfinite(v)) throw PreconditionError("time_bound: inputs must be finite");
  if (!(gamma > 0.0)) throw PreconditionError("time_bound: mu must be positive");
  const double growth = C_gauss * R * (2.0 * R / gamma + std::abs(std::log(gamma)) + 1.0) * V_norm;
  const double a = numer / (2.0 * (growth + 1.0));
  const double b = std::sqrt(std::log(2.0) / (std::abs(W_inf) + std::abs(W_sup) + 1.0));
  const double s = std::min(a, b);
  return s * s;
}

/// Existence time for data f0 >= 4 mu with R = 1 + mu + 2 |f0|.
inline double time_bound(double mu, double f0_norm, double C_gauss, double V_norm, double W_inf,
                         double W_sup) {
  const double R = 1.0 + mu + 2.0 * f0_norm;
  return time_bound_formula(std::min(mu, 1.0), R, mu, C_gauss, V_norm, W_inf, W_sup);
}

/// Window length of the global continuation: R' = R + 2M, gamma = min(mu, m/4)
/// and min(mu, 1, m/4) in the numerator.
inline double time_bound_global(double mu, double m, double f0_norm, double M, double C_gauss,
                                double V_norm, double W_inf, double W_sup) {
  const double R_prime = 1.0 + mu + 2.0 * f0_norm + 2.0 * M;
  const double gamma = std::min(mu, m / 4.0);
  return time_bound_formula(std::min({mu, 1.0, m / 4.0}), R_prime, gamma, C_gauss, V_norm, W_inf,
                            W_sup);
}

struct PicardSpace {
  double mu = 0.0;
  double Lambda = 0.0;
  double R = 0.0;
  double T = 0.0;       ///< window length actually used (safety applied)
  double T_raw = 0.0;   ///< formula value
  double safety = 0.5;
  double C_gauss = 0.0;
  bool C_gauss_used = true;  ///< false when V = 0 and the constant drops out
  double W_inf = 0.0, W_sup = 0.0, V_norm = 0.0;
  double f0_norm = 0.0;
  double lower = 0.0;          ///< members of Y satisfy f >= lower (mu, or gamma for windows)
  double initial_lower = 0.0;  ///< required lower bound on the initial data (4 mu, or m)
};

struct PicardOptions {
  int time_steps = 64;  ///< lattice steps per window
  double tol = 1e-10;
  int max_iter = 60;
  double y_tol = 1e-10;
  double safety = 0.5;
  std::optional<double> mu;
  std::optional<double> Lambda;
  std::optional<double> C_gauss;
  /// When set, the lattice is doubled until the fixed point moves by less
  /// than this amount at the common times (at most max_doublings times).
  std::optional<double> refine_tol;
  int max_doublings = 4;
  IntegralBoundsOptions c1_options{};
};

inline PicardSpace make_picard_space(const Field& f0, const CoefficientSet& c,
                                     const PicardOptions& opt = {}) {
  require_same_grid(f0.grid(), c.grid(), "make_picard_space");
  PicardSpace s;
  s.mu = opt.mu.value_or(f0.min() / 4.0);
  if (!(s.mu > 0.0)) throw PreconditionError("make_picard_space: mu must be positive");
  s.Lambda = opt.Lambda.value_or(f0.max());
  s.f0_norm = sup_norm(f0);
  s.R = 1.0 + s.mu + 2.0 * s.f0_norm;
  s.W_inf = c.W_inf();
  s.W_sup = c.W_sup();
  s.V_norm = c.V_norm();
  s.safety = opt.safety;
  if (opt.C_gauss) {
    s.C_gauss = *opt.C_gauss;
  } else if (s.V_norm == 0.0) {
    s.C_gauss = 0.0;
    s.C_gauss_used = false;
  } else {
    s.C_gauss = integral_bound_C1(c, opt.c1_options);
  }
  s.T_raw = time_bound(s.mu, s.f0_norm, s.C_gauss, s.V_norm, s.W_inf, s.W_sup);
  s.T = s.safety * s.T_raw;
  s.lower = s.mu;
  s.initial_lower = 4.0 * s.mu;
  return s;
}

struct FixedPointReport {
  int iterations = 0;
  double final_residual = 0.0;
  double empirical_contraction = 0.0;
  bool in_Y_every_iterate = true;
  int time_steps = 0;
  std::vector<double> residuals;  ///< sup distance between consecutive iterates
  std::vector<double> ratios;     ///< residual ratios above the noise floor
  std::vector<double> iterate_min, iterate_max;
};

namespace detail {

inline Field entropy_density(const Field& f) {
  return f.map([](double v) { return v * std::log(v); });
}

inline std::vector<double> uniform_lattice(double t0, double T, int steps) {
  std::vector<double> ts(static_cast<std::size_t>(steps) + 1);
  for (int k = 0; k <= steps; ++k) ts[static_cast<std::size_t>(k)] = t0 + T * k / steps;
  ts.back() = t0 + T;
  return ts;
}

}  // namespace detail

/// The discrete Duhamel map on a fixed coefficient set; owns the cached
/// implicit step factorisations.
class DuhamelMap {
 public:
  explicit DuhamelMap(const CoefficientSet& c) : c_(&c), steps_(c) {
    const TorusGrid& g = c.grid();
    v_zero_ = c.V_norm() == 0.0;
    if (c.time_independent_pi()) V_static_ = c.V(0.0);
    (void)g;
  }

  const CoefficientSet& coefficients() const noexcept { return *c_; }
  const StepSolver& steps() const noexcept { return steps_; }
  bool nonlinear_term_vanishes() const noexcept { return v_zero_; }

  VectorField V(double t) const { return V_static_ ? *V_static_ : c_->V(t); }

  /// Source div(V F) at time t for the given entropy density F.
  Field source(const Field& F, double t) const { return divergence(V(t).scaled(F)); }

  /// Psi f on the time lattice of f, with initial value f0. A lattice whose
  /// spacing matches dt_uniform to rounding is stepped with exactly that
  /// width, so cached factorisations are reused across windows.
  Trajectory operator()(const Trajectory& f, const Field& f0,
                        std::optional<double> dt_uniform = std::nullopt) const {
    if (f.empty()) throw PreconditionError("psi_map: empty trajectory");
    require_same_grid(f.grid(), f0.grid(), "psi_map");
    if (!dt_uniform && f.size() > 1) {
      const double d = (f.times().back() - f.time(0)) / static_cast<double>(f.size() - 1);
      bool uniform = true;
      for (std::size_t k = 1; k < f.size() && uniform; ++k)
        uniform = std::abs(f.time(k) - f.time(k - 1) - d) <= 1e-9 * d;
      if (uniform) dt_uniform = d;
    }
    Trajectory out(f.grid());
    out.push_back(f.time(0), f0);
    Eigen::VectorXd u = detail::to_vector(f0);
    std::optional<Field> F_prev;
    if (!v_zero_) F_prev = detail::entropy_density(f.frame(0));
    for (std::size_t k = 1; k < f.size(); ++k) {
      const double dt = dt_uniform ? *dt_uniform : f.time(k) - f.time(k - 1);
      const double tm = f.time(k - 1) + 0.5 * (f.time(k) - f.time(k - 1));
      if (!v_zero_) {
        Field F_cur = detail::entropy_density(f.frame(k));
        Field Fm = (*F_prev + F_cur) * 0.5;
        u += dt * detail::to_vector(source(Fm, tm));
        F_prev = std::move(F_cur);
      }
      u = steps_.solve(u, tm, dt);
      out.push_back(f.time(k), detail::to_field(f.grid(), u));
    }
    return out;
  }

 private:
  const CoefficientSet* c_;
  StepSolver steps_;
  bool v_zero_ = false;
  std::optional<VectorField> V_static_;
};

namespace detail {

inline void require_in_Y(const Trajectory& f, const PicardSpace& space, double y_tol,
                         const char* where) {
  const double lo = f.min(), hi = sup_norm(f);
  if (lo < space.lower - y_tol)
    throw PreconditionError(std::string(where) + ": trajectory leaves Y, min f = " +
                            format_double(lo) + " < " + format_double(space.lower));
  if (hi > space.R + y_tol)
    throw PreconditionError(std::string(where) + ": trajectory leaves Y, sup f = " +
                            format_double(hi) + " > R = " + format_double(space.R));
}

inline bool in_Y(const Trajectory& f, const PicardSpace& space, double y_tol) {
  return f.min() >= space.lower - y_tol && sup_norm(f) <= space.R + y_tol;
}

inline Trajectory constant_extension(const Field& f0, const std::vector<double>& times) {
  Trajectory tr(f0.grid());
  for (double t : times) tr.push_back(t, f0);
  return tr;
}

}  // namespace detail

inline Trajectory psi_map(const Trajectory& f, const Field& f0, const DuhamelMap& psi,
                          const PicardSpace& space, double y_tol = 1e-10) {
  detail::require_in_Y(f, space, y_tol, "psi_map");
  return psi(f, f0);
}

inline Trajectory psi_map(const Trajectory& f, const Field& f0, const CoefficientSet& c,
                          const PicardSpace& space, double y_tol = 1e-10) {
  DuhamelMap psi(c);
  return psi_map(f, f0, psi, space, y_tol);
}

namespace detail {

inline std::pair<Trajectory, FixedPointReport> fixed_point_on_lattice(
    const Field& f0, const DuhamelMap& psi, const PicardSpace& space,
    const std::vector<double>& times, double dt, double tol, int max_iter, double y_tol) {
  FixedPointReport rep;
  rep.time_steps = static_cast<int>(times.size()) - 1;
  Trajectory f = constant_extension(f0, times);
  if (psi.nonlinear_term_vanishes()) {
    // Psi does not depend on f: one application is the fixed point.
    Trajectory g = psi(f, f0, dt);
    rep.iterations = 1;
    rep.iterate_min.push_back(g.min());
    rep.iterate_max.push_back(g.max());
    rep.final_residual = 0.0;
    rep.empirical_contraction = 0.0;
    rep.in_Y_every_iterate = in_Y(g, space, y_tol);
    if (!rep.in_Y_every_iterate)
      throw NumericalError("fixed_point_solve: iterate left Y (min " + format_double(g.min()) +
                           ", sup " + format_double(sup_norm(g)) + ")");
    return {std::move(g), std::move(rep)};
  }
  const double noise = 1e-13 * std::max(1.0, space.R);
  int rising = 0;
  for (int it = 1; it <= max_iter; ++it) {
    Trajectory g = psi(f, f0, dt);
    const double d = sup_distance(g, f);
    rep.iterations = it;
    rep.residuals.push_back(d);
    rep.iterate_min.push_back(g.min());
    rep.iterate_max.push_back(g.max());
    if (!in_Y(g, space, y_tol)) {
      rep.in_Y_every_iterate = false;
      throw NumericalError("fixed_point_solve: iterate " + std::to_string(it) +
                           " left Y (min " + format_double(g.min()) + ", sup " +
                           format_double(sup_norm(g)) + ")");
    }
    const std::size_t n = rep.residuals.size();
    if (n >= 2 && rep.residuals[n - 2] > noise && d > noise) {
      const double r = d / rep.residuals[n - 2];
      rep.ratios.push_back(r);
      rep.empirical_contraction = std::max(rep.empirical_contraction, r);
      rising = r > 1.0 ? rising + 1 : 0;
      if (rising >= 3)
        throw NumericalError("fixed_point_solve: no contraction (ratio > 1 three times in a row)");
    }
    f = std::move(g);
    rep.final_residual = d;
    if (d <= tol) break;
  }
  if (rep.final_residual > tol)
    throw NumericalError("fixed_point_solve: not converged after " + std::to_string(max_iter) +
                         " iterations, residual " + format_double(rep.final_residual));
  return {std::move(f), std::move(rep)};
}

}  // namespace detail

/// Picard iteration f <- Psi f from the constant extension of f0 on
/// [t0, t0 + space.T].
inline std::pair<Trajectory, FixedPointReport> fixed_point_solve(
    const Field& f0, const DuhamelMap& psi, const PicardSpace& space, double tol, int max_iter,
    const PicardOptions& opt = {}, double t0 = 0.0) {
  require_same_grid(f0.grid(), psi.coefficients().grid(), "fixed_point_solve");
  if (f0.min() < space.initial_lower - opt.y_tol)
    throw PreconditionError("fixed_point_solve: initial data below " +
                            format_double(space.initial_lower) + " (min f0 = " +
                            format_double(f0.min()) + ")");
  if (!(space.T > 0.0)) throw PreconditionError("fixed_point_solve: window length must be positive");
  int steps = opt.time_steps;
  auto result = detail::fixed_point_on_lattice(
      f0, psi, space, detail::uniform_lattice(t0, space.T, steps), space.T / steps, tol, max_iter,
      opt.y_tol);
  if (!opt.refine_tol) return result;
  for (int d = 0; d < opt.max_doublings; ++d) {
    steps *= 2;
    auto finer = detail::fixed_point_on_lattice(
        f0, psi, space, detail::uniform_lattice(t0, space.T, steps), space.T / steps, tol, max_iter,
      opt.y_tol);
    double change = 0.0;
    for (std::size_t k = 0; k < result.first.size(); ++k)
      change = std::max(change, sup_norm(result.first.frame(k) - finer.first.frame(2 * k)));
    result = std::move(finer);
    if (change < *opt.refine_tol) break;
  }
  return result;
}

inline std::pair<Trajectory, FixedPointReport> fixed_point_solve(
    const Field& f0, const CoefficientSet& c, const PicardSpace& space, double tol, int max_iter,
    const PicardOptions& opt = {}) {
  DuhamelMap psi(c);
  return fixed_point_solve(f0, psi, space, tol, max_iter, opt);
}

/// sup |Psi f - Psi g| / sup |f - g|, zero when f = g.
inline double contraction_ratio(const Trajectory& f, const Trajectory& g, const Field& f0,
                                const DuhamelMap& psi, const PicardSpace& space,
                                double y_tol = 1e-10) {
  const double den = sup_distance(f, g);
  if (den == 0.0) return 0.0;
  const Trajectory pf = psi_map(f, f0, psi, space, y_tol);
  const Trajectory pg = psi_map(g, f0, psi, space, y_tol);
  return sup_distance(pf, pg) / den;
}

inline double contraction_ratio(const Trajectory& f, const Trajectory& g, const Field& f0,
                                const CoefficientSet& c, const PicardSpace& space) {
  DuhamelMap psi(c);
  return contraction_ratio(f, g, f0, psi, space);
}

/// sup |f - g| / sup |f0 - g0| for the two fixed points in the same space.
inline double continuity_check(const Field& f0, const Field& g0, const DuhamelMap& psi,
                               const PicardSpace& space, const PicardOptions& opt = {}) {
  const auto [f, rf] = fixed_point_solve(f0, psi, space, opt.tol, opt.max_iter, opt);
  const auto [g, rg] = fixed_point_solve(g0, psi, space, opt.tol, opt.max_iter, opt);
  const double den = sup_norm(f0 - g0);
  const double num = sup_distance(f, g);
  if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return num / den;
}

inline double continuity_check(const Field& f0, const Field& g0, const CoefficientSet& c,
                               const PicardSpace& space, const PicardOptions& opt = {}) {
  DuhamelMap psi(c);
  return continuity_check(f0, g0, psi, space, opt);
}

/// Largest sup-norm residual of d_t f - L f - div(V f log f) over the
/// lattice, with every term taken at the right end point of its step.
inline double pde_residual(const Trajectory& f, const DuhamelMap& psi) {
  const CoefficientSet& c = psi.coefficients();
  double worst = 0.0;
  for (std::size_t k = 1; k < f.size(); ++k) {
    const double dt = f.time(k) - f.time(k - 1);
    const double t = f.time(k);
    const Eigen::VectorXd fk = detail::to_vector(f.frame(k));
    Eigen::VectorXd r = (fk - detail::to_vector(f.frame(k - 1))) / dt - assemble_generator(c, t) * fk;
    if (!psi.nonlinear_term_vanishes())
      r -= detail::to_vector(psi.source(detail::entropy_density(f.frame(k)), t));
    worst = std::max(worst, r.cwiseAbs().maxCoeff());
  }
  return worst;
}

/// Discrete right-hand side of the expanded equation, L f + div(V f log f).
inline Field expanded_rhs(const Field& f, const CoefficientSet& c, double t = 0.0) {
  Eigen::VectorXd r = assemble_generator(c, t) * detail::to_vector(f);
  r += detail::to_vector(divergence(c.V(t).scaled(detail::entropy_density(f))));
  return detail::to_field(c.grid(), r);
}

/// Random element of Y on the given times: low-frequency Fourier data with
/// 1/k^2 coefficients varying linearly in time, clipped into [lower, R].
inline Trajectory random_y_element(const TorusGrid& grid, const std::vector<double>& times,
                                   double lower, double R, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  const double mid = 0.5 * (lower + R), amp = 0.5 * (R - lower);
  const double base = mid + 0.5 * amp * U(rng);
  constexpr int K = 4;
  std::array<std::array<double, 4>, K> a{};  // cos/sin at t0, cos/sin slope
  std::array<std::array<double, 4>, K> b{};  // same along axis 2
  for (int k = 0; k < K; ++k)
    for (int q = 0; q < 4; ++q) {
      a[static_cast<std::size_t>(k)][static_cast<std::size_t>(q)] = amp * U(rng) / ((k + 1) * (k + 1));
      b[static_cast<std::size_t>(k)][static_cast<std::size_t>(q)] = amp * U(rng) / ((k + 1) * (k + 1));
    }
  const double t0 = times.front();
  const double span = std::max(times.back() - t0, std::numeric_limits<double>::min());
  Trajectory tr(grid);
  for (double t : times) {
    const double s = (t - t0) / span;
    tr.push_back(t, Field::sample(grid, [&](const Point& x) {
      double v = base;
      for (int k = 0; k < K; ++k) {
        const auto& ak = a[static_cast<std::size_t>(k)];
        const double w = 2.0 * std::numbers::pi * (k + 1);
        v += (ak[0] + s * ak[2]) * std::cos(w * x[0]) + (ak[1] + s * ak[3]) * std::sin(w * x[0]);
        if (grid.dim() == 2) {
          const auto& bk = b[static_cast<std::size_t>(k)];
          v += (bk[0] + s * bk[2]) * std::cos(w * x[1]) + (bk[1] + s * bk[3]) * std::sin(w * x[1]);
        }
      }
      return std::clamp(v, lower, R);
    }));
  }
  return tr;
}

// ---------------------------------------------------------------------------
// Global continuation

struct GlobalPlan {
  double m = 0.0, M = 0.0;
  double mu = 0.0;
  double R = 0.0, R_prime = 0.0;
  double gamma = 0.0;
  double T = 0.0;              ///< local existence time (safety applied)
  double T_prime = 0.0;        ///< window length (safety applied)
  double T_prime_raw = 0.0;
  double C_gauss = 0.0;
  bool C_gauss_used = true;
  long long num_windows = 0;
};

struct GlobalOptions {
  PicardOptions picard{};
  double bounds_tol = -1.0;  ///< negative: 1e-6 + h^2
  bool keep_window_frames = false;
  std::optional<long long> windows;
  /// Called with every lattice frame (window starts included once).
  std::function<void(double, const Field&)> on_frame;
};

struct GlobalResult {
  Trajectory seams;  ///< frames at the window boundaries k T'
  Trajectory frames; ///< every lattice frame when keep_window_frames is set
  GlobalPlan plan;
  double min_f = std::numeric_limits<double>::infinity();
  double max_f = -std::numeric_limits<double>::infinity();
  bool seams_bit_identical = true;
  int max_iterations = 0;
  double max_contraction = 0.0;
};

/// windows: optional larger window count (shorter windows than T').
inline GlobalPlan make_global_plan(const Field& f0, const CoefficientSet& c, double T_final,
                                   const PicardOptions& opt = {},
                                   std::optional<long long> windows = std::nullopt) {
  if (!(T_final > 0.0)) throw PreconditionError("global_solve: T_final must be positive");
  const PicardSpace local = make_picard_space(f0, c, opt);
  const EquilibriumState eq = equilibrium_state(c, integrate(f0));
  const AprioriBounds ab = apriori_bounds(f0, eq, c);
  GlobalPlan p;
  p.m = ab.m;
  p.M = ab.M;
  p.mu = local.mu;
  p.R = local.R;
  p.R_prime = local.R + 2.0 * ab.M;
  p.gamma = std::min(local.mu, ab.m / 4.0);
  p.T = local.T;
  p.C_gauss = local.C_gauss;
  p.C_gauss_used = local.C_gauss_used;
  p.T_prime_raw = time_bound_global(local.mu, ab.m, local.f0_norm, ab.M, local.C_gauss,
                                    local.V_norm, local.W_inf, local.W_sup);
  p.T_prime = opt.safety * p.T_prime_raw;
  p.num_windows = static_cast<long long>(std::ceil(T_final / p.T_prime - 1e-9));
  p.num_windows = std::max<long long>(p.num_windows, 1);
  if (windows) {
    if (*windows < p.num_windows)
      throw PreconditionError("global_solve: " + std::to_string(*windows) +
                              " windows are fewer than the " + std::to_string(p.num_windows) +
                              " required by T'");
    p.num_windows = *windows;
    p.T_prime = T_final / static_cast<double>(p.num_windows);
  }
  return p;
}

/// Marches windows of length T' with the Picard solve, each window starting
/// from the terminal frame of the previous one, and checks m <= f <= M on
/// every lattice frame.
inline GlobalResult global_solve(const Field& f0, const CoefficientSet& c, double T_final,
                                 const GlobalOptions& opt = {}) {
  require_same_grid(f0.grid(), c.grid(), "global_solve");
  const AssumptionReport ar =
      validate_assumptions(c, f0, opt.picard.mu.value_or(f0.min() / 4.0),
                           opt.picard.Lambda.value_or(f0.max()));
  if (const auto* bad = ar.first_failure()) throw AssumptionError(bad->id, bad->detail);

  GlobalResult res;
  res.plan = make_global_plan(f0, c, T_final, opt.picard, opt.windows);
  const GlobalPlan& p = res.plan;
  const double h = c.grid().h();
  const double btol = opt.bounds_tol >= 0.0 ? opt.bounds_tol : 1e-6 + h * h;

  PicardSpace space;
  space.mu = p.mu;
  space.R = p.R_prime;
  space.lower = p.gamma;
  space.initial_lower = p.m;
  space.C_gauss = p.C_gauss;
  space.W_inf = c.W_inf();
  space.W_sup = c.W_sup();
  space.V_norm = c.V_norm();
  space.safety = opt.picard.safety;
  space.T_raw = p.T_prime_raw;

  DuhamelMap psi(c);
  res.seams = Trajectory(c.grid());
  res.frames = Trajectory(c.grid());
  res.seams.push_back(0.0, f0);
  if (opt.keep_window_frames) res.frames.push_back(0.0, f0);
  if (opt.on_frame) opt.on_frame(0.0, f0);
  Field current = f0;
  for (long long k = 0; k < p.num_windows; ++k) {
    const double t0 = static_cast<double>(k) * p.T_prime;
    const bool last = k + 1 == p.num_windows;
    const double t1 = last ? T_final : static_cast<double>(k + 1) * p.T_prime;
    space.T = last ? T_final - t0 : p.T_prime;
    space.initial_lower = p.m - btol;
    auto [traj, rep] = fixed_point_solve(current, psi, space, opt.picard.tol, opt.picard.max_iter,
                                         opt.picard, t0);
    if (!(traj.frame(0) == current)) res.seams_bit_identical = false;
    res.max_iterations = std::max(res.max_iterations, rep.iterations);
    res.max_contraction = std::max(res.max_contraction, rep.empirical_contraction);
    for (std::size_t j = 0; j < traj.size(); ++j) {
      const Field& fr = traj.frame(j);
      const double lo = fr.min(), hi = fr.max();
      res.min_f = std::min(res.min_f, lo);
      res.max_f = std::max(res.max_f, hi);
      if (lo < p.m - btol || hi > p.M + btol)
        throw NumericalError("global_solve: a priori bound violated in window " +
                             std::to_string(k) + " at t=" + format_double(traj.time(j)) +
                             " (min " + format_double(lo) + ", max " + format_double(hi) + ")");
      if (j == 0) continue;
      if (opt.keep_window_frames) res.frames.push_back(traj.time(j), fr);
      if (opt.on_frame) opt.on_frame(traj.time(j), fr);
    }
    // Terminal frame becomes the next window's initial data.
    current = traj.back();
    res.seams.push_back(t1, current);
  }
  return res;
}

}  // namespace fpgrain
