#pragma once

// Discrete fundamental solution of d/dt - L on the torus and empirical checks
// of its Gaussian, integral and mass bounds.
//
// The generator is the conservative exponential-fitting discretisation of
//   L f = div((D/pi) grad f) + div(f grad(phi)/pi)
// with face flux (a/h) [B(-P) f_j - B(P) f_i], B(z) = z/(e^z - 1),
// a = face average of D/pi and P = h * drift / a. Off-diagonals are
// nonnegative and L applied to the constant 1 equals W, so implicit Euler
// factors are nonnegative for every step size.

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <numbers>
#include <utility>
#include <vector>

#include "fpgrain/coeff.hpp"
#include "fpgrain/errors.hpp"
#include "fpgrain/grid.hpp"

namespace fpgrain {

using SparseMatrix = Eigen::SparseMatrix<double>;

namespace detail {

/// z / (e^z - 1)
inline double bernoulli(double z) {
  if (std::abs(z) < 1e-10) return 1.0 - 0.5 * z;
  return z / std::expm1(z);
}

inline Eigen::VectorXd to_vector(const Field& f) {
  return Eigen::Map<const Eigen::VectorXd>(f.values().data(),
                                           static_cast<Eigen::Index>(f.size()));
}

inline Field to_field(const TorusGrid& g, const Eigen::VectorXd& v) {
  return Field(g, std::vector<double>(v.data(), v.data() + v.size()));
}

inline std::vector<Eigen::Index> shifted_index(const TorusGrid& g, int axis, int offset) {
  std::vector<Eigen::Index> idx(g.size());
  for (std::size_t j = 0; j < g.size(); ++j)
    idx[j] = static_cast<Eigen::Index>(g.shift(j, axis, offset));
  return idx;
}

}  // namespace detail

/// Sparse matrix of the discrete generator L_h at time t.
inline SparseMatrix assemble_generator(const CoefficientSet& c, double t) {
  const TorusGrid& g = c.grid();
  const FaceCoefficients fc = c.faces(t);
  const double h = g.h();
  const double invh2 = 1.0 / (h * h);
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(g.size() * 4 * static_cast<std::size_t>(g.dim()));
  for (int a = 0; a < g.dim(); ++a) {
    const auto& diff = fc.diffusivity.component(a);
    const auto& drift = fc.drift.component(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const auto j = g.shift(i, a, 1);
      const double A = diff[i];
      const double P = drift[i] * h / A;
      const double bp = detail::bernoulli(P), bm = detail::bernoulli(-P);
      const auto ii = static_cast<Eigen::Index>(i), jj = static_cast<Eigen::Index>(j);
      trip.emplace_back(ii, jj, A * bm * invh2);
      trip.emplace_back(ii, ii, -A * bp * invh2);
      trip.emplace_back(jj, jj, -A * bm * invh2);
      trip.emplace_back(jj, ii, A * bp * invh2);
    }
  }
  const auto N = static_cast<Eigen::Index>(g.size());
  SparseMatrix L(N, N);
  L.setFromTriplets(trip.begin(), trip.end());
  L.makeCompressed();
  return L;
}

/// Implicit Euler factors (I - dt L(t_mid))^{-1} with cached sparse LU
/// factorisations. Not safe for concurrent use; give each thread its own.
class StepSolver {
 public:
  explicit StepSolver(const CoefficientSet& c) : c_(&c) {}

  const CoefficientSet& coefficients() const noexcept { return *c_; }

  Eigen::SparseLU<SparseMatrix>& factor(double t_mid, double dt) const {
    if (!(dt > 0.0)) throw PreconditionError("StepSolver: dt must be positive");
    const double key_t = c_->time_independent_pi() ? 0.0 : t_mid;
    const auto key = std::make_pair(dt, key_t);
    auto it = cache_.find(key);
    if (it != cache_.end()) return *it->second;
    if (cache_.size() >= max_cache_) cache_.clear();
    const auto N = static_cast<Eigen::Index>(c_->grid().size());
    SparseMatrix I(N, N);
    I.setIdentity();
    SparseMatrix A = I - dt * assemble_generator(*c_, key_t);
    auto lu = std::make_unique<Eigen::SparseLU<SparseMatrix>>();
    lu->analyzePattern(A);
    lu->factorize(A);
    if (lu->info() != Eigen::Success)
      throw NumericalError("StepSolver: singular implicit step (check A1/A4)");
    return *cache_.emplace(key, std::move(lu)).first->second;
  }

  Eigen::VectorXd solve(const Eigen::VectorXd& b, double t_mid, double dt) const {
    return factor(t_mid, dt).solve(b);
  }
  Eigen::MatrixXd solve(const Eigen::MatrixXd& B, double t_mid, double dt) const {
    return factor(t_mid, dt).solve(B);
  }
  Eigen::MatrixXd solve_transpose(const Eigen::MatrixXd& B, double t_mid, double dt) const {
    return factor(t_mid, dt).transpose().solve(B);
  }
  Field step(const Field& f, double t_mid, double dt) const {
    return detail::to_field(c_->grid(), solve(detail::to_vector(f), t_mid, dt));
  }

  void set_max_cache(std::size_t n) { max_cache_ = std::max<std::size_t>(n, 1); }

 private:
  const CoefficientSet* c_;
  mutable std::map<std::pair<double, double>, std::unique_ptr<Eigen::SparseLU<SparseMatrix>>>
      cache_;
  std::size_t max_cache_ = 512;
};

/// Largest single implicit step allowed when pi depends on time.
inline constexpr double kMaxTimeDependentStep = 1e-2;

struct Propagator {
  TorusGrid grid;
  double s = 0.0;
  double t = 0.0;
  int substeps = 1;
  Eigen::MatrixXd matrix;  ///< K(x_i, t; y_j, s)
  double min_entry = 0.0;
  bool undershoot = false;  ///< some entry below -1e-10

  double tau() const noexcept { return t - s; }
};

inline Propagator build_propagator(const StepSolver& steps, double s, double t, int substeps) {
  const CoefficientSet& c = steps.coefficients();
  if (!(t > s)) throw PreconditionError("build_propagator: need t > s");
  if (substeps < 1) throw PreconditionError("build_propagator: substeps must be >= 1");
  const double dt = (t - s) / substeps;
  if (!c.time_independent_pi() && dt > kMaxTimeDependentStep * (1.0 + 1e-12))
    throw PreconditionError("build_propagator: time-dependent pi needs steps <= 1e-2");
  const auto N = static_cast<Eigen::Index>(c.grid().size());
  Eigen::MatrixXd X = Eigen::MatrixXd::Identity(N, N);
  for (int k = 1; k <= substeps; ++k) X = steps.solve(X, s + (k - 0.5) * dt, dt);
  Propagator P;
  P.grid = c.grid();
  P.s = s;
  P.t = t;
  P.substeps = substeps;
  P.matrix = X / c.grid().cell_volume();
  P.min_entry = X.minCoeff() / c.grid().cell_volume();
  if (P.min_entry < -1e-6)
    throw NumericalError("build_propagator: negative kernel entry " + format_double(P.min_entry) +
                         "; substepping too coarse");
  P.undershoot = P.min_entry < -1e-10;
  return P;
}

inline Propagator build_propagator(const CoefficientSet& c, const TorusGrid& grid, double s,
                                   double t, int substeps) {
  require_same_grid(c.grid(), grid, "build_propagator");
  StepSolver steps(c);
  return build_propagator(steps, s, t, substeps);
}

/// (P g)(x_i) = h^d sum_j K(x_i, y_j) g(y_j)
inline Field apply_propagator(const Propagator& P, const Field& g) {
  require_same_grid(P.grid, g.grid(), "apply_propagator");
  const Eigen::VectorXd v = P.grid.cell_volume() * (P.matrix * detail::to_vector(g));
  return detail::to_field(P.grid, v);
}

/// Central y-gradient of every kernel row: component a has entries
/// (K(i, j + e_a) - K(i, j - e_a)) / (2h).
inline std::array<Eigen::MatrixXd, 2> row_gradients(const TorusGrid& g, const Eigen::MatrixXd& K) {
  std::array<Eigen::MatrixXd, 2> out;
  const double inv2h = 0.5 / g.h();
  for (int a = 0; a < g.dim(); ++a) {
    const auto plus = detail::shifted_index(g, a, 1);
    const auto minus = detail::shifted_index(g, a, -1);
    Eigen::MatrixXd G(K.rows(), K.cols());
    for (Eigen::Index j = 0; j < K.cols(); ++j)
      G.col(j) = (K.col(plus[static_cast<std::size_t>(j)]) -
                  K.col(minus[static_cast<std::size_t>(j)])) *
                 inv2h;
    out[static_cast<std::size_t>(a)] = std::move(G);
  }
  return out;
}

/// grad_y K(x_i, t; y, s) for every row i.
inline std::vector<VectorField> kernel_y_gradient(const Propagator& P) {
  const auto G = row_gradients(P.grid, P.matrix);
  std::vector<VectorField> rows;
  rows.reserve(P.grid.size());
  for (Eigen::Index i = 0; i < P.matrix.rows(); ++i) {
    std::array<std::vector<double>, 2> comps;
    for (int a = 0; a < P.grid.dim(); ++a) {
      const Eigen::VectorXd r = G[static_cast<std::size_t>(a)].row(i).transpose();
      comps[static_cast<std::size_t>(a)].assign(r.data(), r.data() + r.size());
    }
    rows.emplace_back(P.grid, Placement::cell, std::move(comps));
  }
  return rows;
}

/// Whole-space heat kernel with diffusivity a summed over the integer
/// translates with |k|_inf <= 3.
inline double periodized_heat_kernel(const Point& x, const Point& y, double tau, double a,
                                     int dim = 1) {
  if (!(tau > 0.0)) throw PreconditionError("periodized_heat_kernel: tau must be positive");
  if (!(a > 0.0)) throw PreconditionError("periodized_heat_kernel: a must be positive");
  if (dim != 1 && dim != 2) throw PreconditionError("periodized_heat_kernel: dim must be 1 or 2");
  const double norm = std::pow(4.0 * std::numbers::pi * a * tau, -0.5 * dim);
  const double inv = 1.0 / (4.0 * a * tau);
  double s = 0.0;
  // images out to exp(-40) relative weight
  const int kmax = 2 + static_cast<int>(std::ceil(std::sqrt(160.0 * a * tau)));
  const int k2max = dim == 2 ? kmax : 0;
  for (int k1 = -kmax; k1 <= kmax; ++k1)
    for (int k2 = -k2max; k2 <= k2max; ++k2) {
      const double d1 = x[0] - y[0] - k1;
      double r2 = d1 * d1;
      if (dim == 2) {
        const double d2 = x[1] - y[1] - k2;
        r2 += d2 * d2;
      }
      s += std::exp(-r2 * inv);
    }
  return norm * s;
}

// ---------------------------------------------------------------------------
// Gaussian bounds

struct GaussianFit {
  double C_fit = 0.0;
  double c_fit = 0.0;
  double max_residual = 0.0;
  std::array<int, 2> deriv_order{0, 0};
  std::size_t samples = 0;
};

struct GaussianFitOptions {
  /// Only samples with |x-y|^2/(t-s) <= z_max enter the fit; beyond that the
  /// periodic images dominate and the whole-space envelope does not apply.
  double z_max = 10.0;
  /// Samples below floor_rel times the slice maximum are roundoff.
  double floor_rel = 1e-10;
  int bins = 40;
};

/// Magnitude of d_t^a grad_y^b K for every entry of P.
inline Eigen::MatrixXd kernel_derivative_magnitude(const Propagator& P, std::array<int, 2> orders,
                                                   const CoefficientSet* c) {
  const int a = orders[0], b = orders[1];
  if (a < 0 || b < 0 || a > 1 || b > 2 || 2 * a + b > 2)
    throw PreconditionError("kernel derivatives need 2a + b <= 2");
  Eigen::MatrixXd K = P.matrix;
  if (a == 1) {
    if (c == nullptr) throw PreconditionError("time derivative needs the coefficient set");
    require_same_grid(c->grid(), P.grid, "kernel_derivative_magnitude");
    K = assemble_generator(*c, P.t) * P.matrix;
  }
  if (b == 0) return K.cwiseAbs();
  const auto G = row_gradients(P.grid, K);
  Eigen::MatrixXd sq = Eigen::MatrixXd::Zero(K.rows(), K.cols());
  if (b == 1) {
    for (int d = 0; d < P.grid.dim(); ++d) sq += G[static_cast<std::size_t>(d)].cwiseAbs2();
    return sq.cwiseSqrt();
  }
  for (int d = 0; d < P.grid.dim(); ++d) {
    const auto H = row_gradients(P.grid, G[static_cast<std::size_t>(d)]);
    for (int e = 0; e < P.grid.dim(); ++e) sq += H[static_cast<std::size_t>(e)].cwiseAbs2();
  }
  return sq.cwiseSqrt();
}

/// Fit log|d_t^a grad_y^b K| + ((d+2a+b)/2) log(t-s) <= log C - c |x-y|^2/(t-s)
/// over a ladder of propagators: slope by least squares, intercept raised
/// until no sample lies above the envelope.
inline GaussianFit validate_gaussian_bounds(const std::vector<Propagator>& ladder,
                                            std::array<int, 2> orders,
                                            const CoefficientSet* c = nullptr,
                                            const GaussianFitOptions& opt = {}) {
  if (ladder.empty()) throw PreconditionError("validate_gaussian_bounds: empty ladder");
  std::vector<double> zs, ys;
  for (const auto& P : ladder) {
    const double tau = P.tau();
    if (!(tau > 0.0) || tau > 1.0 + 1e-12)
      throw PreconditionError("validate_gaussian_bounds: needs 0 < t - s <= 1");
    const Eigen::MatrixXd mag = kernel_derivative_magnitude(P, orders, c);
    const double floor = opt.floor_rel * mag.maxCoeff();
    const double shift = 0.5 * (P.grid.dim() + 2 * orders[0] + orders[1]) * std::log(tau);
    for (Eigen::Index i = 0; i < mag.rows(); ++i) {
      const Point x = P.grid.coords(static_cast<std::size_t>(i));
      for (Eigen::Index j = 0; j < mag.cols(); ++j) {
        const double v = mag(i, j);
        if (!(v > floor)) continue;
        const double r = P.grid.distance(x, P.grid.coords(static_cast<std::size_t>(j)));
        const double z = r * r / tau;
        if (z > opt.z_max) continue;
        zs.push_back(z);
        ys.push_back(std::log(v) + shift);
      }
    }
  }
  if (zs.size() < 2) throw NumericalError("validate_gaussian_bounds: too few samples");
  // Slope from the upper envelope (largest sample per z-bin) past its peak.
  // Derivative kernels vanish on the diagonal and rise first, which would
  // otherwise flip the sign of a plain least-squares slope.
  const int bins = opt.bins;
  std::vector<double> env(static_cast<std::size_t>(bins), -std::numeric_limits<double>::infinity());
  for (std::size_t k = 0; k < zs.size(); ++k) {
    const int b = std::min(bins - 1, static_cast<int>(zs[k] / opt.z_max * bins));
    env[static_cast<std::size_t>(b)] = std::max(env[static_cast<std::size_t>(b)], ys[k]);
  }
  int peak = 0;
  for (int b = 1; b < bins; ++b)
    if (env[static_cast<std::size_t>(b)] > env[static_cast<std::size_t>(peak)]) peak = b;
  std::vector<double> bz, by;
  for (int b = peak; b < bins; ++b)
    if (std::isfinite(env[static_cast<std::size_t>(b)])) {
      bz.push_back((b + 0.5) * opt.z_max / bins);
      by.push_back(env[static_cast<std::size_t>(b)]);
    }
  if (bz.size() < 3) throw NumericalError("validate_gaussian_bounds: envelope too short to fit");
  double zm = 0.0, ym = 0.0;
  for (std::size_t k = 0; k < bz.size(); ++k) {
    zm += bz[k];
    ym += by[k];
  }
  zm /= static_cast<double>(bz.size());
  ym /= static_cast<double>(bz.size());
  double szz = 0.0, szy = 0.0;
  for (std::size_t k = 0; k < bz.size(); ++k) {
    szz += (bz[k] - zm) * (bz[k] - zm);
    szy += (bz[k] - zm) * (by[k] - ym);
  }
  GaussianFit fit;
  fit.deriv_order = orders;
  fit.samples = zs.size();
  fit.c_fit = -szy / szz;
  if (!std::isfinite(fit.c_fit) || !(fit.c_fit > 0.0))
    throw NumericalError("validate_gaussian_bounds: non-finite or nonpositive decay rate");
  double logC = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < zs.size(); ++k) logC = std::max(logC, ys[k] + fit.c_fit * zs[k]);
  fit.C_fit = std::exp(logC);
  fit.max_residual = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < zs.size(); ++k)
    fit.max_residual = std::max(fit.max_residual, ys[k] - (logC - fit.c_fit * zs[k]));
  if (!std::isfinite(fit.C_fit)) throw NumericalError("validate_gaussian_bounds: non-finite C");
  return fit;
}

inline GaussianFit validate_gaussian_bounds(const Propagator& P, std::array<int, 2> orders,
                                            const CoefficientSet* c = nullptr,
                                            const GaussianFitOptions& opt = {}) {
  return validate_gaussian_bounds(std::vector<Propagator>{P}, orders, c, opt);
}

/// Propagators K(., s + tau_k; ., s) for increasing tau_k, sharing one step size.
inline std::vector<Propagator> propagator_ladder(const CoefficientSet& c,
                                                 const std::vector<double>& taus, double dt,
                                                 double s = 0.0) {
  StepSolver steps(c);
  std::vector<Propagator> out;
  const auto N = static_cast<Eigen::Index>(c.grid().size());
  Eigen::MatrixXd X = Eigen::MatrixXd::Identity(N, N);
  int level = 0;
  for (double tau : taus) {
    if (!(tau > 0.0) || tau > 1.0 + 1e-12)
      throw PreconditionError("propagator_ladder: needs 0 < t - s <= 1");
    const int target = static_cast<int>(std::lround(tau / dt));
    if (target <= level) throw PreconditionError("propagator_ladder: taus must increase");
    for (; level < target; ++level) X = steps.solve(X, s + (level + 0.5) * dt, dt);
    Propagator P;
    P.grid = c.grid();
    P.s = s;
    P.t = s + level * dt;
    P.substeps = level;
    P.matrix = X / c.grid().cell_volume();
    P.min_entry = P.matrix.minCoeff();
    P.undershoot = P.min_entry < -1e-10;
    out.push_back(std::move(P));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mass sandwich exp(W_inf (t-s)) <= row mass <= exp(W_sup (t-s))

struct MassSandwichReport {
  double tau = 0.0;
  double lower = 1.0, upper = 1.0;
  double min_row_mass = 1.0, max_row_mass = 1.0;
  double violation = 0.0;  ///< amount by which the rows leave [lower, upper]
  double slack = 0.0;      ///< h^2 max|W| (t-s), the discretisation allowance
  bool passed = true;
};

inline MassSandwichReport validate_mass_sandwich(const Propagator& P, const CoefficientSet& c) {
  require_same_grid(P.grid, c.grid(), "validate_mass_sandwich");
  MassSandwichReport r;
  r.tau = P.tau();
  r.lower = std::exp(c.W_inf() * r.tau);
  r.upper = std::exp(c.W_sup() * r.tau);
  const Eigen::VectorXd rows = P.matrix.rowwise().sum() * P.grid.cell_volume();
  r.min_row_mass = rows.minCoeff();
  r.max_row_mass = rows.maxCoeff();
  r.violation = std::max({0.0, r.lower - r.min_row_mass, r.max_row_mass - r.upper});
  const double h = P.grid.h();
  r.slack = h * h * std::max(std::abs(c.W_inf()), std::abs(c.W_sup())) * r.tau;
  r.passed = r.violation <= 1e-6 + r.slack;
  return r;
}

// ---------------------------------------------------------------------------
// Integral bounds on grad_y K
//
//   I1 = int_{t'}^{t} int |grad_y K(x,t;y,s)| dy ds                <= C1 |t-t'|^{1/2}
//   I2 = int_0^{t'} int int_{t'}^{t} |d_tau grad_y K(x',tau;y,s)|  <= C2 |t-t'|^{1/2}
//   I3 = int_0^t int |grad_y K(x,t;y,s) - grad_y K(x',t;y,s)|      <= C3 t^{(1-b)/2} |x-x'|^b
//
// Time integrals use the implicit Euler lattice of width dt (right endpoint
// in the kernel age), y-integrals the midpoint rule.

struct IntegralBoundsOptions {
  double dt = 1e-3;
  std::vector<double> times{0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0};
  std::vector<double> offsets{1.0 / 32, 1.0 / 16, 1.0 / 8, 1.0 / 4};  ///< |x-x'| along axis 1
  int max_levels_time_dependent = 200;
  int rows_time_dependent = 4;
  bool force_anchored = false;  ///< use the time-dependent algorithm even for static pi
};

struct IntegralConstants {
  int n = 0;
  double dt = 0.0;
  double C1 = 0.0, C2 = 0.0, C3 = 0.0;
};

struct IntegralBoundsReport {
  double beta = 0.5;
  IntegralConstants coarse, fine;
  std::array<double, 3> drift{1.0, 1.0, 1.0};  ///< max/min of each constant over the two grids
  bool stable() const {
    return std::all_of(drift.begin(), drift.end(), [](double d) { return d <= 2.0; });
  }
};

namespace detail {

inline std::vector<int> time_levels(const std::vector<double>& times, double dt) {
  std::vector<int> lv;
  for (double t : times) {
    if (!(t > 0.0) || t > 1.0 + 1e-12)
      throw PreconditionError("integral bounds: times must lie in (0, 1]");
    lv.push_back(std::max(1, static_cast<int>(std::lround(t / dt))));
  }
  std::sort(lv.begin(), lv.end());
  lv.erase(std::unique(lv.begin(), lv.end()), lv.end());
  return lv;
}

/// h^d sum_y |G(row, y)| for vector-valued rows given as per-axis matrices.
inline double row_l1(const std::array<Eigen::MatrixXd, 2>& G, int dim, Eigen::Index row,
                     double vol) {
  double s = 0.0;
  for (Eigen::Index j = 0; j < G[0].cols(); ++j) {
    double q = 0.0;
    for (int a = 0; a < dim; ++a) {
      const double v = G[static_cast<std::size_t>(a)](row, j);
      q += v * v;
    }
    s += std::sqrt(q);
  }
  return s * vol;
}

inline double row_diff_l1(const std::array<Eigen::MatrixXd, 2>& G, Eigen::Index r1,
                          const std::array<Eigen::MatrixXd, 2>& H, Eigen::Index r2, int dim,
                          double vol) {
  double s = 0.0;
  for (Eigen::Index j = 0; j < G[0].cols(); ++j) {
    double q = 0.0;
    for (int a = 0; a < dim; ++a) {
      const double v =
          G[static_cast<std::size_t>(a)](r1, j) - H[static_cast<std::size_t>(a)](r2, j);
      q += v * v;
    }
    s += std::sqrt(q);
  }
  return s * vol;
}

inline int offset_cells(const TorusGrid& g, double off) {
  return std::max(1, static_cast<int>(std::lround(off * g.n())));
}

/// Streaming evaluation for time-independent pi: K depends on t - s only.
inline IntegralConstants integral_constants_static(const CoefficientSet& c,
                                                   const IntegralBoundsOptions& opt) {
  const TorusGrid& g = c.grid();
  const double dt = opt.dt;
  const auto levels = time_levels(opt.times, dt);
  const int L = levels.back();
  const auto N = static_cast<Eigen::Index>(g.size());
  const double vol = g.cell_volume();
  const int dim = g.dim();
  const double beta = c.beta_declared();

  std::vector<int> offs;
  for (double o : opt.offsets) offs.push_back(offset_cells(g, o));

  // gsum[i][k], dsum[i][k], esum[o][i][k] for kernel age k*dt, k = 1..L
  std::vector<std::vector<double>> gk(static_cast<std::size_t>(N), std::vector<double>(L + 1, 0.0));
  std::vector<std::vector<double>> dk(static_cast<std::size_t>(N), std::vector<double>(L + 1, 0.0));
  std::vector<std::vector<std::vector<double>>> ek(
      offs.size(), std::vector<std::vector<double>>(static_cast<std::size_t>(N),
                                                    std::vector<double>(L + 1, 0.0)));

  StepSolver steps(c);
  Eigen::MatrixXd X = Eigen::MatrixXd::Identity(N, N);
  std::array<Eigen::MatrixXd, 2> Gprev;
  for (int k = 1; k <= L; ++k) {
    X = steps.solve(X, 0.0, dt);
    const auto G = row_gradients(g, X / vol);
    for (Eigen::Index i = 0; i < N; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      gk[ui][k] = row_l1(G, dim, i, vol);
      if (k >= 2) dk[ui][k - 1] = row_diff_l1(G, i, Gprev, i, dim, vol);
      for (std::size_t o = 0; o < offs.size(); ++o) {
        const auto i2 = static_cast<Eigen::Index>(g.shift(ui, 0, offs[o]));
        ek[o][ui][k] = row_diff_l1(G, i, G, i2, dim, vol);
      }
    }
    Gprev = G;
  }

  IntegralConstants out;
  out.n = g.n();
  out.dt = dt;
  for (Eigen::Index i = 0; i < N; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    std::vector<double> Gp(L + 1, 0.0), Dp(L + 1, 0.0);  // prefix sums over ages 1..k
    for (int k = 1; k <= L; ++k) {
      Gp[k] = Gp[k - 1] + gk[ui][k];
      Dp[k] = Dp[k - 1] + dk[ui][k];
    }
    for (int lv : levels) {
      const double delta = lv * dt;
      out.C1 = std::max(out.C1, dt * Gp[lv] / std::sqrt(delta));
    }
    for (std::size_t p = 0; p < levels.size(); ++p)
      for (std::size_t q = p + 1; q < levels.size(); ++q) {
        const int Lp = levels[p], Lt = levels[q];
        double I2 = 0.0;
        // ages k in [Lp - j, Lt - j - 1] for s-levels j = 0..Lp-1
        for (int j = 0; j < Lp; ++j) I2 += Dp[Lt - j - 1] - Dp[Lp - j - 1];
        I2 *= dt;
        out.C2 = std::max(out.C2, I2 / std::sqrt((Lt - Lp) * dt));
      }
    for (std::size_t o = 0; o < offs.size(); ++o) {
      double acc = 0.0;
      const double r = static_cast<double>(std::min(offs[o], g.n() - offs[o])) * g.h();
      std::size_t next = 0;
      for (int k = 1; k <= L; ++k) {
        acc += ek[o][ui][k];
        if (next < levels.size() && k == levels[next]) {
          const double t = k * dt;
          out.C3 = std::max(out.C3, dt * acc / (std::pow(t, 0.5 * (1.0 - beta)) * std::pow(r, beta)));
          ++next;
        }
      }
    }
  }
  return out;
}

/// Backward sweeps from each anchor time give rows of K(x, tau; ., s) for all
/// lattice s <= tau; used when pi depends on time.
inline IntegralConstants integral_constants_anchored(const CoefficientSet& c,
                                                     const IntegralBoundsOptions& opt) {
  const TorusGrid& g = c.grid();
  const double tmax = *std::max_element(opt.times.begin(), opt.times.end());
  double dt = std::max(opt.dt, tmax / opt.max_levels_time_dependent);
  if (!c.time_independent_pi()) dt = std::min(dt, kMaxTimeDependentStep);
  const auto levels = time_levels(opt.times, dt);
  const int L = levels.back();
  const auto N = static_cast<Eigen::Index>(g.size());
  const double vol = g.cell_volume();
  const int dim = g.dim();
  const double beta = c.beta_declared();

  std::vector<int> offs;
  for (double o : opt.offsets) offs.push_back(offset_cells(g, o));
  // Base rows evenly spread over the grid, followed by their offset partners.
  const int nb = std::max(1, std::min<int>(opt.rows_time_dependent, static_cast<int>(N)));
  std::vector<std::size_t> rows;
  for (int b = 0; b < nb; ++b) rows.push_back(static_cast<std::size_t>(b) * g.size() / nb);
  for (int b = 0; b < nb; ++b)
    for (int o : offs) rows.push_back(g.shift(rows[static_cast<std::size_t>(b)], 0, o));
  const auto R = static_cast<Eigen::Index>(rows.size());
  Eigen::MatrixXd E = Eigen::MatrixXd::Zero(N, R);
  for (Eigen::Index r = 0; r < R; ++r) E(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)]), r) = 1.0;

  StepSolver steps(c);
  steps.set_max_cache(static_cast<std::size_t>(L) + 8);
  auto t_mid = [&](int k) { return (k - 0.5) * dt; };  // step k maps level k-1 to k

  // For anchor level A: Gs[j] holds y-gradients (rows x N per axis) of K(., A dt; ., j dt).
  std::vector<std::array<Eigen::MatrixXd, 2>> prev, cur;
  // g1[b][A][j], d2[b][A][j] (A -> A+1), e3[o][b][A][j]
  const auto ub = static_cast<std::size_t>(nb);
  std::vector<std::vector<std::vector<double>>> g1(ub), d2(ub);
  std::vector<std::vector<std::vector<std::vector<double>>>> e3(offs.size(),
                                                                std::vector<std::vector<std::vector<double>>>(ub));
  for (std::size_t b = 0; b < ub; ++b) {
    g1[b].assign(L + 1, std::vector<double>(L + 1, 0.0));
    d2[b].assign(L + 1, std::vector<double>(L + 1, 0.0));
    for (auto& e : e3) e[b].assign(L + 1, std::vector<double>(L + 1, 0.0));
  }

  for (int A = 1; A <= L; ++A) {
    cur.assign(static_cast<std::size_t>(A), {});
    Eigen::MatrixXd Y = E;  // columns: rows of P(A, j) as functions of y
    for (int j = A - 1; j >= 0; --j) {
      Y = steps.solve_transpose(Y, t_mid(j + 1), dt);
      const Eigen::MatrixXd Kt = Y.transpose() / vol;  // R x N
      cur[static_cast<std::size_t>(j)] = row_gradients(g, Kt);
    }
    for (std::size_t b = 0; b < ub; ++b) {
      const auto rb = static_cast<Eigen::Index>(b);
      for (int j = 0; j < A; ++j) {
        const auto& G = cur[static_cast<std::size_t>(j)];
        g1[b][A][j] = row_l1(G, dim, rb, vol);
        for (std::size_t o = 0; o < offs.size(); ++o) {
          const auto r2 = static_cast<Eigen::Index>(ub + b * offs.size() + o);
          e3[o][b][A][j] = row_diff_l1(G, rb, G, r2, dim, vol);
        }
        if (A >= 2 && j < A - 1)
          d2[b][A - 1][j] = row_diff_l1(G, rb, prev[static_cast<std::size_t>(j)], rb, dim, vol);
      }
    }
    prev = std::move(cur);
  }

  IntegralConstants out;
  out.n = g.n();
  out.dt = dt;
  for (std::size_t b = 0; b < ub; ++b) {
    // I1 for windows [t', t] with t' in {0} U times, t in times
    std::vector<int> starts{0};
    starts.insert(starts.end(), levels.begin(), levels.end());
    for (int Lt : levels)
      for (int Lp : starts) {
        if (Lp >= Lt) continue;
        double I1 = 0.0;
        for (int j = Lp; j < Lt; ++j) I1 += g1[b][Lt][j];
        out.C1 = std::max(out.C1, dt * I1 / std::sqrt((Lt - Lp) * dt));
      }
    for (std::size_t p = 0; p < levels.size(); ++p)
      for (std::size_t q = p + 1; q < levels.size(); ++q) {
        const int Lp = levels[p], Lt = levels[q];
        double I2 = 0.0;
        for (int j = 0; j < Lp; ++j)
          for (int A = Lp; A < Lt; ++A) I2 += d2[b][A][j];
        out.C2 = std::max(out.C2, dt * I2 / std::sqrt((Lt - Lp) * dt));
      }
    for (std::size_t o = 0; o < offs.size(); ++o) {
      const double r = static_cast<double>(std::min(offs[o], g.n() - offs[o])) * g.h();
      for (int Lt : levels) {
        double I3 = 0.0;
        for (int j = 0; j < Lt; ++j) I3 += e3[o][b][Lt][j];
        const double t = Lt * dt;
        out.C3 = std::max(out.C3, dt * I3 / (std::pow(t, 0.5 * (1.0 - beta)) * std::pow(r, beta)));
      }
    }
  }
  return out;
}

}  // namespace detail

/// Fitted C1, C2, C3 on the grid of c.
inline IntegralConstants integral_bound_constants(const CoefficientSet& c,
                                                  const IntegralBoundsOptions& opt = {}) {
  if (opt.times.empty()) throw PreconditionError("integral bounds: no times given");
  if (c.time_independent_pi() && !opt.force_anchored)
    return detail::integral_constants_static(c, opt);
  return detail::integral_constants_anchored(c, opt);
}

/// C1 alone: the y-integral of |grad_y K| over windows [t', t] of the listed widths.
inline double integral_bound_C1(const CoefficientSet& c, const IntegralBoundsOptions& opt = {}) {
  return integral_bound_constants(c, opt).C1;
}

/// Constants on grid and on one refinement (2n), with the drift between them.
inline IntegralBoundsReport validate_integral_bounds(const CoefficientSet& c, const TorusGrid& grid,
                                                     const std::vector<double>& times,
                                                     IntegralBoundsOptions opt = {}) {
  opt.times = times;
  const CoefficientSet coarse = c.on_grid(grid);
  const CoefficientSet fine = c.on_grid(TorusGrid(grid.dim(), 2 * grid.n()));
  IntegralBoundsReport r;
  r.beta = c.beta_declared();
  r.coarse = integral_bound_constants(coarse, opt);
  r.fine = integral_bound_constants(fine, opt);
  auto ratio = [](double a, double b) {
    const double lo = std::min(a, b), hi = std::max(a, b);
    if (hi == 0.0) return 1.0;
    return lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
  };
  r.drift = {ratio(r.coarse.C1, r.fine.C1), ratio(r.coarse.C2, r.fine.C2),
             ratio(r.coarse.C3, r.fine.C3)};
  return r;
}

}  // namespace fpgrain
