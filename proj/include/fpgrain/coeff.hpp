#pragma once

// Coefficient functions D(x), pi(x,t), phi(x), their sampling on a grid, the
// derived fields V = grad D / pi and W = div(grad phi / pi), and the
// machine check of assumptions A1-A4.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fpgrain/errors.hpp"
#include "fpgrain/expr.hpp"
#include "fpgrain/grid.hpp"

namespace fpgrain {

/// A coefficient given either as an expression in x1..xd (and t) or as a
/// tabulated Field.
struct CoefficientInput {
  std::optional<Expr> expr;
  std::optional<Field> table;
  std::string source;  // expression text or table path, echoed in reports

  static CoefficientInput from_expr(const std::string& text, int dim) {
    CoefficientInput c;
    c.expr = parse_expr(text, dim);
    c.source = text;
    return c;
  }
  static CoefficientInput from_table(Field f, std::string path = "<table>") {
    CoefficientInput c;
    c.table = std::move(f);
    c.source = std::move(path);
    return c;
  }

  bool valid() const noexcept { return expr.has_value() || table.has_value(); }
  bool time_dependent() const { return expr && depends_on_time(*expr); }

  Field sample(const TorusGrid& grid, double t = 0.0) const {
    if (table) {
      require_same_grid(table->grid(), grid, "CoefficientInput::sample");
      return *table;
    }
    if (!expr) throw PreconditionError("coefficient has neither expression nor table");
    const int dim = grid.dim();
    return Field::sample(grid, [&](const Point& x) {
      return eval_expr(*expr, std::span<const double>(x.data(), static_cast<std::size_t>(dim)), t);
    });
  }
};

struct Tolerances {
  double bisection_rel = 1e-12;   ///< |g(C)| <= rel * mass for C_eq
  double newton_tol = 1e-13;      ///< FV implicit step residual (sup norm, relative to max f)
  int max_newton_iter = 50;
  double envelope_abs = 1e-6;     ///< a priori envelope check, plus h^2 slack
  double picard_tol = 1e-10;
  int picard_max_iter = 60;
  double y_tol = 1e-10;           ///< membership slack for the Picard set Y
  double time_safety = 0.5;       ///< extra factor applied to the Picard time bound
};

struct ProblemSpec {
  int dim = 1;
  int n = 64;
  CoefficientInput D, pi, phi, f0;
  std::optional<double> mu;      ///< default: min f0 / 4
  std::optional<double> Lambda;  ///< default: max f0
  double T_final = 1.0;
  double beta_declared = 0.5;
  int time_samples = 64;
  Tolerances tol;

  TorusGrid grid() const { return TorusGrid(dim, n); }
  Field initial_field() const { return f0.sample(grid(), 0.0); }
  double resolved_mu(const Field& f0_field) const { return mu.value_or(f0_field.min() / 4.0); }
  double resolved_Lambda(const Field& f0_field) const { return Lambda.value_or(f0_field.max()); }

  /// Checks mu > 0, Lambda >= 4 mu, T_final > 0.
  void validate() const {
    if (!D.valid() || !pi.valid() || !phi.valid() || !f0.valid())
      throw PreconditionError("ProblemSpec: D, pi, phi and f0 must all be given");
    if (!(T_final > 0.0)) throw PreconditionError("ProblemSpec: T_final must be positive");
    if (mu && !(*mu > 0.0)) throw PreconditionError("ProblemSpec: mu must be positive");
    if (mu && Lambda && !(*Lambda >= 4.0 * *mu))
      throw PreconditionError("ProblemSpec: Lambda must be >= 4 mu");
    if (time_samples < 1) throw PreconditionError("ProblemSpec: time_samples must be >= 1");
  }
};

/// Face-centred coefficients of the divergence-form operator at one time.
/// Component a, index i refers to the face between cell i and i + e_a.
struct FaceCoefficients {
  VectorField diffusivity;  ///< average of D/pi over the two cells
  VectorField drift;        ///< (phi_j - phi_i)/h times the face average of 1/pi
  VectorField inv_pi;       ///< average of 1/pi over the two cells
};

class CoefficientSet {
 public:
  CoefficientSet(const TorusGrid& grid, Field D, Field phi, CoefficientInput pi_input,
                 std::vector<double> sample_times, double beta_declared)
      : grid_(grid),
        D_(std::move(D)),
        phi_(std::move(phi)),
        pi_input_(std::move(pi_input)),
        beta_declared_(beta_declared) {
    time_independent_pi_ = !pi_input_.time_dependent();
    if (time_independent_pi_) {
      pi_cache_ = pi_input_.sample(grid_, 0.0);
      sample_times = {0.0};
    }
    sample_times_ = std::move(sample_times);
    certify();
  }

  const TorusGrid& grid() const noexcept { return grid_; }
  const Field& D() const noexcept { return D_; }
  const Field& phi() const noexcept { return phi_; }
  const CoefficientInput& pi_input() const noexcept { return pi_input_; }

  Field pi(double t) const {
    if (pi_cache_) return *pi_cache_;
    Field p = pi_input_.sample(grid_, t);
    if (p.min() <= 0.0)
      throw AssumptionError("A4", "pi <= 0 at t=" + format_double(t));
    return p;
  }

  /// V = grad D / pi, cell placement.
  VectorField V(double t) const {
    return gradient(D_).scaled(pi(t).map([](double p) { return 1.0 / p; }));
  }

  FaceCoefficients faces(double t) const {
    const Field p = pi(t);
    FaceCoefficients fc{VectorField(grid_, Placement::face), VectorField(grid_, Placement::face),
                        VectorField(grid_, Placement::face)};
    const double invh = 1.0 / grid_.h();
    for (int a = 0; a < grid_.dim(); ++a) {
      for (std::size_t i = 0; i < grid_.size(); ++i) {
        const std::size_t j = grid_.shift(i, a, 1);
        const double ip = 0.5 * (1.0 / p[i] + 1.0 / p[j]);
        fc.inv_pi.component(a)[i] = ip;
        fc.diffusivity.component(a)[i] = 0.5 * (D_[i] / p[i] + D_[j] / p[j]);
        fc.drift.component(a)[i] = (phi_[j] - phi_[i]) * invh * ip;
      }
    }
    return fc;
  }

  /// W = div(grad phi / pi) with the face calculus of the discrete operator,
  /// so that L_h applied to the constant 1 is exactly W.
  Field W(double t) const { return divergence(faces(t).drift); }

  const std::vector<double>& sample_times() const noexcept { return sample_times_; }
  bool time_independent_pi() const noexcept { return time_independent_pi_; }
  double theta() const noexcept { return theta_; }
  double C_D() const noexcept { return C_D_; }
  double C_pi_low() const noexcept { return C_pi_low_; }
  double C_pi_up() const noexcept { return C_pi_up_; }
  double W_inf() const noexcept { return W_inf_; }
  double W_sup() const noexcept { return W_sup_; }
  /// sup over grid and sample times of |V|.
  double V_norm() const noexcept { return V_norm_; }
  /// Largest magnitude over the sampled non-divergence coefficients.
  double coefficient_bound() const noexcept { return coeff_bound_; }
  double beta_declared() const noexcept { return beta_declared_; }

  /// Same coefficient functions sampled on another grid. Only possible when
  /// D and phi were given as expressions.
  CoefficientSet on_grid(const TorusGrid& grid) const {
    if (grid == grid_) return *this;
    if (!D_input_ || !phi_input_ || !D_input_->expr || !phi_input_->expr || !pi_input_.expr)
      throw PreconditionError("coefficients given as tables cannot be resampled");
    CoefficientSet out(grid, D_input_->sample(grid), phi_input_->sample(grid), pi_input_,
                       sample_times_, beta_declared_);
    out.set_inputs(*D_input_, *phi_input_);
    return out;
  }
  void set_inputs(CoefficientInput D, CoefficientInput phi) {
    D_input_ = std::move(D);
    phi_input_ = std::move(phi);
  }

 private:
  void certify() {
    require_same_grid(grid_, D_.grid(), "CoefficientSet(D)");
    require_same_grid(grid_, phi_.grid(), "CoefficientSet(phi)");
    if (D_.min() <= 0.0)
      throw AssumptionError("A4", "D <= 0 at x=" + format_double(grid_.coords(D_.argmin())[0]));
    C_D_ = D_.min();
    theta_ = C_pi_low_ = W_inf_ = std::numeric_limits<double>::infinity();
    C_pi_up_ = W_sup_ = -std::numeric_limits<double>::infinity();
    V_norm_ = coeff_bound_ = 0.0;
    for (double t : sample_times_) {
      const Field p = pi_input_.sample(grid_, t);
      if (p.min() <= 0.0) {
        const auto x = grid_.coords(p.argmin());
        std::ostringstream os;
        os << "pi <= 0 at x=(" << format_double(x[0]);
        if (grid_.dim() == 2) os << "," << format_double(x[1]);
        os << "), t=" << format_double(t);
        throw AssumptionError("A4", os.str());
      }
      C_pi_low_ = std::min(C_pi_low_, p.min());
      C_pi_up_ = std::max(C_pi_up_, p.max());
      for (std::size_t i = 0; i < grid_.size(); ++i) theta_ = std::min(theta_, D_[i] / p[i]);
      const Field w = W(t);
      W_inf_ = std::min(W_inf_, w.min());
      W_sup_ = std::max(W_sup_, w.max());
      const VectorField v = V(t);
      V_norm_ = std::max(V_norm_, v.sup_norm());
      const FaceCoefficients fc = faces(t);
      coeff_bound_ = std::max({coeff_bound_, fc.diffusivity.sup_norm(), fc.drift.sup_norm(),
                               sup_norm(w), v.sup_norm()});
    }
  }

  TorusGrid grid_;
  Field D_, phi_;
  CoefficientInput pi_input_;
  std::optional<CoefficientInput> D_input_, phi_input_;
  std::optional<Field> pi_cache_;
  std::vector<double> sample_times_;
  bool time_independent_pi_ = true;
  double beta_declared_ = 0.5;
  double theta_ = 0, C_D_ = 0, C_pi_low_ = 0, C_pi_up_ = 0, W_inf_ = 0, W_sup_ = 0, V_norm_ = 0;
  double coeff_bound_ = 0;
};

/// Uniform time samples 0 = t_0 < ... < t_k = T_final used to certify
/// time-dependent coefficients.
inline std::vector<double> certification_times(double T_final, int samples) {
  std::vector<double> ts;
  for (int k = 0; k <= samples; ++k) ts.push_back(T_final * k / samples);
  return ts;
}

inline CoefficientSet build_coefficients(const TorusGrid& grid, const CoefficientInput& D,
                                         const CoefficientInput& pi, const CoefficientInput& phi,
                                         double T_final = 1.0, double beta_declared = 0.5,
                                         int time_samples = 64) {
  if (D.time_dependent()) throw AssumptionError("model", "D must not depend on t");
  if (phi.time_dependent()) throw AssumptionError("model", "phi must not depend on t");
  CoefficientSet c(grid, D.sample(grid), phi.sample(grid), pi,
                   certification_times(T_final, time_samples), beta_declared);
  c.set_inputs(D, phi);
  return c;
}

inline CoefficientSet build_coefficients(const ProblemSpec& spec) {
  spec.validate();
  return build_coefficients(spec.grid(), spec.D, spec.pi, spec.phi, spec.T_final,
                            spec.beta_declared, spec.time_samples);
}

/// Convenience for expression-only problems.
inline CoefficientSet build_coefficients(const TorusGrid& grid, const std::string& D,
                                         const std::string& pi, const std::string& phi,
                                         double T_final = 1.0, double beta_declared = 0.5) {
  return build_coefficients(grid, CoefficientInput::from_expr(D, grid.dim()),
                            CoefficientInput::from_expr(pi, grid.dim()),
                            CoefficientInput::from_expr(phi, grid.dim()), T_final, beta_declared);
}

struct AssumptionCheck {
  std::string id;  ///< "A1".."A4"
  bool passed = false;
  double witness = 0.0;
  std::string detail;
};

struct AssumptionReport {
  std::vector<AssumptionCheck> checks;

  bool all_passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed; });
  }
  const AssumptionCheck& get(const std::string& id) const {
    for (const auto& c : checks)
      if (c.id == id) return c;
    throw PreconditionError("no assumption check named " + id);
  }
  /// First failing check, or nullptr.
  const AssumptionCheck* first_failure() const {
    for (const auto& c : checks)
      if (!c.passed) return &c;
    return nullptr;
  }
};

inline AssumptionReport validate_assumptions(const CoefficientSet& c, const Field& f0, double mu,
                                             double Lambda) {
  require_same_grid(c.grid(), f0.grid(), "validate_assumptions");
  AssumptionReport r;

  r.checks.push_back({"A1", c.theta() > 0.0, c.theta(),
                      "min D/pi over sampled (x,t) = " + format_double(c.theta())});

  const double bound = c.coefficient_bound();
  const bool beta_ok = c.beta_declared() > 0.0 && c.beta_declared() < 1.0;
  r.checks.push_back(
      {"A2", std::isfinite(bound) && beta_ok, bound,
       "sampled coefficients bounded by " + format_double(bound) +
           "; Hoelder exponent beta=" + format_double(c.beta_declared()) +
           " is declared, not verified"});

  const double fmin = f0.min(), fmax = f0.max();
  std::string a3;
  bool a3_ok = true;
  if (!(mu > 0.0)) {
    a3_ok = false;
    a3 = "mu must be positive";
  } else if (fmin < 4.0 * mu) {
    a3_ok = false;
    a3 = "min f0 = " + format_double(fmin) + " < 4 mu = " + format_double(4.0 * mu);
  } else if (fmax > Lambda) {
    a3_ok = false;
    a3 = "max f0 = " + format_double(fmax) + " > Lambda = " + format_double(Lambda);
  } else {
    a3 = "4 mu = " + format_double(4.0 * mu) + " <= f0 in [" + format_double(fmin) + ", " +
         format_double(fmax) + "] <= Lambda";
  }
  r.checks.push_back({"A3", a3_ok, fmin, a3});

  const bool a4_ok = c.C_D() >= 1.0 && c.C_pi_low() > 0.0;
  r.checks.push_back({"A4", a4_ok, c.C_D(),
                      "min D = " + format_double(c.C_D()) + " (needs >= 1); pi in [" +
                          format_double(c.C_pi_low()) + ", " + format_double(c.C_pi_up()) + "]"});
  return r;
}

}  // namespace fpgrain
