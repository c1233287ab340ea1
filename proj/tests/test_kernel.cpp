#include <gtest/gtest.h>

#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>
#include <numbers>
#include <random>

#include "fpgrain/kernel.hpp"

using namespace fpgrain;
using std::numbers::pi;

namespace {

CoefficientSet heat(int n, int dim = 1) { return build_coefficients(TorusGrid(dim, n), "1", "1", "0"); }

Field cosine_mode(const TorusGrid& g) {
  return Field::sample(g, [](Point x) { return std::cos(2 * pi * x[0]); });
}

}  // namespace

TEST(Generator, RowSumsEqualW) {
  for (int dim : {1, 2}) {
    const auto c = build_coefficients(TorusGrid(dim, 16), "2 + cos(2*pi*x1)", "1 + 0.5*sin(2*pi*x1)",
                                      dim == 1 ? "cos(2*pi*x1)" : "cos(2*pi*x1)*sin(2*pi*x2)");
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(c.grid().size()));
    const Eigen::VectorXd L1 = assemble_generator(c, 0.0) * ones;
    const Field W = c.W(0.0);
    for (std::size_t i = 0; i < c.grid().size(); ++i)
      EXPECT_NEAR(L1[static_cast<Eigen::Index>(i)], W[i], 1e-10 * (1 + std::fabs(W[i])));
  }
}

TEST(Generator, ColumnSumsVanish) {
  const auto c = build_coefficients(TorusGrid(2, 16), "2 + cos(2*pi*x1)", "1.5 + cos(2*pi*x2)",
                                    "sin(2*pi*(x1 - x2))");
  const auto N = static_cast<Eigen::Index>(c.grid().size());
  const Eigen::RowVectorXd colsum = Eigen::RowVectorXd::Ones(N) * assemble_generator(c, 0.0);
  EXPECT_LE(colsum.cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Propagator, HeatDiagonalMatchesPeriodisedGaussian) {
  const auto c = heat(64);
  const auto P = build_propagator(c, c.grid(), 0.0, 0.01, 100);
  const double oracle = periodized_heat_kernel({0, 0}, {0, 0}, 0.01, 1.0);
  EXPECT_NEAR(oracle, 2.8209, 1e-4);
  for (Eigen::Index i = 0; i < P.matrix.rows(); ++i) EXPECT_NEAR(P.matrix(i, i) / oracle, 1.0, 0.02);
}

TEST(Propagator, RowMassIsOneWithoutPotential) {
  for (int dim : {1, 2}) {
    const auto c = build_coefficients(TorusGrid(dim, 16), "2 + cos(2*pi*x1)",
                                      "1 + 0.5*sin(2*pi*x1)", "0");
    const auto P = build_propagator(c, c.grid(), 0.0, 0.1, 20);
    const Eigen::VectorXd rows = P.matrix.rowwise().sum() * c.grid().cell_volume();
    EXPECT_LE((rows.array() - 1.0).abs().maxCoeff(), 1e-8);
    const Field out = apply_propagator(P, Field(c.grid(), 2.5));
    EXPECT_LE(sup_norm(out - Field(c.grid(), 2.5)), 1e-8);
  }
}

TEST(Propagator, ConstantsMoveWhenWIsNonzero) {
  const auto c = build_coefficients(TorusGrid(1, 32), "1", "1", "cos(2*pi*x1)");
  const auto P = build_propagator(c, c.grid(), 0.0, 0.05, 10);
  EXPECT_GT(sup_norm(apply_propagator(P, Field(c.grid(), 1.0)) - Field(c.grid(), 1.0)), 1e-3);
}

TEST(Propagator, IdentityLimit) {
  const auto c = build_coefficients(TorusGrid(1, 64), "2 + cos(2*pi*x1)", "1", "cos(2*pi*x1)");
  const auto P = build_propagator(c, c.grid(), 0.0, 1e-8, 1);
  const Field g = Field::sample(c.grid(), [](Point x) { return 1 + 0.5 * std::sin(2 * pi * x[0]); });
  EXPECT_LE(sup_norm(apply_propagator(P, g) - g), 1e-6);
  const auto ms = validate_mass_sandwich(P, c);
  EXPECT_NEAR(ms.min_row_mass, 1.0, 1e-6);
  EXPECT_NEAR(ms.max_row_mass, 1.0, 1e-6);
}

// Implicit Euler damps the mode by (1 + lambda_h dt)^(-tau/dt); with
// dt = 2.5e-6 the time error is below 2e-5 and the spatial one below 6e-5.
TEST(Propagator, HeatFourierModeDecay) {
  const auto c = heat(128);
  const double tau = 0.05;
  const auto P = build_propagator(c, c.grid(), 0.0, tau, 20000);
  const Field g = cosine_mode(c.grid());
  const Field out = apply_propagator(P, g);
  EXPECT_LE(sup_norm(out - std::exp(-4 * pi * pi * tau) * g), 1e-4);
}

TEST(Propagator, PositivityOfKernel) {
  const std::vector<std::array<const char*, 3>> problems = {
      {"1", "1", "0"},
      {"2 + cos(2*pi*x1)", "1", "cos(2*pi*x1)"},
      {"1", "1 + 0.5*sin(2*pi*x1)", "3*sin(2*pi*x1)"},
      {"1.5 + sin(2*pi*x1)", "1 + 0.5*sin(2*pi*(x1 + t))", "cos(4*pi*x1)"},
  };
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  for (const auto& p : problems) {
    const auto c = build_coefficients(TorusGrid(1, 32), p[0], p[1], p[2]);
    const auto P = build_propagator(c, c.grid(), 0.1, 0.2, 10);
    EXPECT_GE(P.min_entry, -1e-10);
    EXPECT_FALSE(P.undershoot);
    EXPECT_GT(P.matrix.minCoeff(), 0.0);
    std::vector<double> v(c.grid().size());
    for (auto& x : v) x = U(rng);
    EXPECT_GE(apply_propagator(P, Field(c.grid(), v)).min(), -1e-10);
  }
}

TEST(Propagator, SemigroupProperty) {
  const auto c = build_coefficients(TorusGrid(1, 32), "2 + cos(2*pi*x1)", "1 + 0.5*sin(2*pi*x1)",
                                    "cos(2*pi*x1)");
  const StepSolver steps(c);
  const auto A = build_propagator(steps, 0.0, 0.02, 20);
  const auto B = build_propagator(steps, 0.02, 0.05, 30);
  const auto AB = build_propagator(steps, 0.0, 0.05, 50);
  const Eigen::MatrixXd composed = c.grid().cell_volume() * B.matrix * A.matrix;
  EXPECT_LE((composed - AB.matrix).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Propagator, SemigroupWithTimeDependentPi) {
  const auto c = build_coefficients(TorusGrid(1, 32), "1", "1 + 0.5*sin(2*pi*(x1 + t))", "0");
  const StepSolver steps(c);
  const auto A = build_propagator(steps, 0.0, 0.04, 8);
  const auto B = build_propagator(steps, 0.04, 0.1, 12);
  const auto AB = build_propagator(steps, 0.0, 0.1, 20);
  const Eigen::MatrixXd composed = c.grid().cell_volume() * B.matrix * A.matrix;
  EXPECT_LE((composed - AB.matrix).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Propagator, FirstOrderInTime) {
  const auto c = build_coefficients(TorusGrid(1, 32), "2 + cos(2*pi*x1)", "1", "cos(2*pi*x1)");
  const Field g = Field::sample(c.grid(), [](Point x) { return 1 + 0.5 * std::sin(2 * pi * x[0]); });
  const StepSolver steps(c);
  auto run = [&](int m) { return apply_propagator(build_propagator(steps, 0.0, 0.1, m), g); };
  const Field u1 = run(40), u2 = run(80), u4 = run(160);
  const double ratio = sup_norm(u2 - u4) / sup_norm(u1 - u2);
  EXPECT_GE(ratio, 0.4);
  EXPECT_LE(ratio, 0.6);
}

TEST(Propagator, AgreesWithMatrixExponential) {
  const auto c = build_coefficients(TorusGrid(1, 32), "2 + cos(2*pi*x1)", "1", "cos(2*pi*x1)");
  const double tau = 0.05;
  const Eigen::MatrixXd L = Eigen::MatrixXd(assemble_generator(c, 0.0));
  const Eigen::MatrixXd E = (tau * L).exp() / c.grid().cell_volume();
  const auto coarse = build_propagator(c, c.grid(), 0.0, tau, 500);
  const auto fine = build_propagator(c, c.grid(), 0.0, tau, 1000);
  const double e1 = (coarse.matrix - E).cwiseAbs().maxCoeff();
  const double e2 = (fine.matrix - E).cwiseAbs().maxCoeff();
  EXPECT_LE(e2 / E.cwiseAbs().maxCoeff(), 1e-3);
  EXPECT_NEAR(e2 / e1, 0.5, 0.05);
}

TEST(Propagator, Preconditions) {
  const auto c = heat(16);
  EXPECT_THROW(build_propagator(c, c.grid(), 0.1, 0.1, 1), PreconditionError);
  EXPECT_THROW(build_propagator(c, c.grid(), 0.0, 0.1, 0), PreconditionError);
  EXPECT_THROW(build_propagator(c, TorusGrid(1, 32), 0.0, 0.1, 1), PreconditionError);
  const auto td = build_coefficients(TorusGrid(1, 16), "1", "1 + 0.5*sin(t)", "0");
  EXPECT_THROW(build_propagator(td, td.grid(), 0.0, 0.1, 5), PreconditionError);
  EXPECT_NO_THROW(build_propagator(td, td.grid(), 0.0, 0.1, 10));
}

TEST(KernelGradient, FlattensForLongTimes) {
  const auto c = heat(64);
  const auto P = build_propagator(c, c.grid(), 0.0, 1.0, 100);
  for (const auto& row : kernel_y_gradient(P)) EXPECT_LE(row.sup_norm(), 1e-3);
}

TEST(KernelGradient, VanishesAtDiagonalForSymmetricKernel) {
  const auto c = heat(64);
  const auto P = build_propagator(c, c.grid(), 0.0, 0.01, 100);
  const auto rows = kernel_y_gradient(P);
  for (std::size_t i = 0; i < rows.size(); ++i)
    EXPECT_NEAR(rows[i].component(0)[i], 0.0, 1e-8);
}

// For the dominant image, int |d_y G| dy = 2 G(0) = 2 (4 pi tau)^(-1/2).
TEST(KernelGradient, L1NormMatchesGaussianOracle) {
  const auto c = heat(128);
  const double tau = 0.01;
  const auto P = build_propagator(c, c.grid(), 0.0, tau, 400);
  const auto rows = kernel_y_gradient(P);
  const double oracle = 2.0 / std::sqrt(4 * pi * tau);
  for (std::size_t i : {std::size_t{0}, std::size_t{37}, std::size_t{127}}) {
    double s = 0.0;
    for (double v : rows[i].component(0)) s += std::fabs(v);
    s *= c.grid().h();
    EXPECT_NEAR(s / oracle, 1.0, 0.02);
  }
}

TEST(HeatKernel, Examples) {
  EXPECT_NEAR(periodized_heat_kernel({0.3, 0}, {0.3, 0}, 0.0025, 1.0), 1.0 / std::sqrt(0.01 * pi), 1e-12);
  EXPECT_NEAR(periodized_heat_kernel({0.3, 0}, {0.3, 0}, 0.0025, 1.0), 5.6419, 1e-4);
  EXPECT_NEAR(periodized_heat_kernel({0.5, 0}, {0.0, 0}, 0.0025, 1.0),
              2.0 / std::sqrt(0.01 * pi) * std::exp(-25.0), 1e-15);
  EXPECT_THROW(periodized_heat_kernel({0, 0}, {0, 0}, 0.0, 1.0), PreconditionError);
}

TEST(HeatKernel, NormalisedOnGrid) {
  const TorusGrid g(1, 256);
  for (double tau : {0.001, 0.01, 0.1, 1.0}) {
    const Field k = Field::sample(g, [&](Point y) { return periodized_heat_kernel({0.2, 0}, y, tau, 1.0); });
    EXPECT_NEAR(integrate(k), 1.0, 1e-10) << tau;
  }
  const TorusGrid g2(2, 64);
  const Field k2 = Field::sample(g2, [](Point y) { return periodized_heat_kernel({0.2, 0.7}, y, 0.01, 1.0, 2); });
  EXPECT_NEAR(integrate(k2), 1.0, 1e-10);
}

TEST(GaussianFit, HeatCaseConstants) {
  const auto c = heat(128);
  const auto ladder = propagator_ladder(c, {0.001, 0.002, 0.004, 0.008}, 1e-5);
  const auto fit = validate_gaussian_bounds(ladder, {0, 0}, &c);
  EXPECT_GE(fit.c_fit, 0.24);
  EXPECT_LE(fit.C_fit, 0.30);
  EXPECT_GE(fit.C_fit, 1.0 / std::sqrt(4 * pi) * 0.95);
  EXPECT_LE(fit.max_residual, 1e-12);
  EXPECT_GT(fit.samples, 100u);
}

TEST(GaussianFit, VariableDiffusivityGivesFiniteConstants) {
  const auto c = build_coefficients(TorusGrid(1, 64), "2 + cos(2*pi*x1)", "1", "0");
  const auto ladder = propagator_ladder(c, {0.002, 0.004, 0.008}, 2e-5);
  for (auto orders : {std::array<int, 2>{0, 0}, std::array<int, 2>{0, 1}, std::array<int, 2>{1, 0}}) {
    const auto fit = validate_gaussian_bounds(ladder, orders, &c);
    EXPECT_TRUE(std::isfinite(fit.C_fit));
    EXPECT_GT(fit.C_fit, 0.0);
    EXPECT_GT(fit.c_fit, 0.0);
    EXPECT_LE(fit.max_residual, 1e-12);
  }
}

TEST(GaussianFit, RejectsLongTimesAndHighOrders) {
  const auto c = heat(16);
  const auto P = build_propagator(c, c.grid(), 0.0, 1.5, 30);
  EXPECT_THROW(validate_gaussian_bounds(P, {0, 0}, &c), PreconditionError);
  const auto Q = build_propagator(c, c.grid(), 0.0, 0.1, 10);
  EXPECT_THROW(validate_gaussian_bounds(Q, {1, 1}, &c), PreconditionError);
  EXPECT_THROW(validate_gaussian_bounds(Q, {1, 0}, nullptr), PreconditionError);
  EXPECT_THROW(propagator_ladder(c, {0.5, 1.5}, 0.01), PreconditionError);
}

TEST(MassSandwich, WithoutPotentialRowsAreOne) {
  const auto c = build_coefficients(TorusGrid(1, 32), "2 + cos(2*pi*x1)", "1", "0");
  const auto r = validate_mass_sandwich(build_propagator(c, c.grid(), 0.0, 0.1, 10), c);
  EXPECT_EQ(r.lower, 1.0);
  EXPECT_EQ(r.upper, 1.0);
  EXPECT_NEAR(r.min_row_mass, 1.0, 1e-8);
  EXPECT_NEAR(r.max_row_mass, 1.0, 1e-8);
  EXPECT_TRUE(r.passed);
}

// phi = cos(2 pi x)/(4 pi^2) gives W = -cos(2 pi x), so W ranges over [-1, 1].
TEST(MassSandwich, CosinePotential) {
  const auto c = build_coefficients(TorusGrid(1, 64), "1", "1", "cos(2*pi*x1)/(4*pi^2)");
  EXPECT_NEAR(c.W_inf(), -1.0, 1e-3);
  EXPECT_NEAR(c.W_sup(), 1.0, 1e-3);
  const auto r = validate_mass_sandwich(build_propagator(c, c.grid(), 0.0, 0.1, 100), c);
  EXPECT_TRUE(r.passed);
  EXPECT_GE(r.min_row_mass, std::exp(-0.1) - 1e-4);
  EXPECT_LE(r.max_row_mass, std::exp(0.1) + 1e-4);
  EXPECT_LE(r.violation, 1e-6);
}

TEST(MassSandwich, StrongPotential) {
  const auto c = build_coefficients(TorusGrid(1, 64), "1", "1", "cos(2*pi*x1)");
  for (double tau : {0.01, 0.1, 0.5}) {
    const auto r = validate_mass_sandwich(build_propagator(c, c.grid(), 0.0, tau, 100), c);
    EXPECT_TRUE(r.passed) << tau << " violation " << r.violation;
  }
}

TEST(IntegralBounds, HeatC1NearContinuumValue) {
  const auto c = heat(64);
  const auto k = integral_bound_constants(c);
  EXPECT_NEAR(k.C1 / (2.0 / std::sqrt(pi)), 1.0, 0.1);
  EXPECT_GT(k.C2, 0.0);
  EXPECT_GT(k.C3, 0.0);
}

TEST(IntegralBounds, RefinementStable) {
  const auto c = heat(64);
  const auto r = validate_integral_bounds(c, c.grid(), IntegralBoundsOptions{}.times);
  EXPECT_TRUE(r.stable());
  EXPECT_EQ(r.coarse.n, 64);
  EXPECT_EQ(r.fine.n, 128);
  for (double d : r.drift) EXPECT_LE(d, 2.0);
}

TEST(IntegralBounds, ZeroWidthAndZeroOffsetTermsVanish) {
  const auto c = heat(32);
  const auto P = build_propagator(c, c.grid(), 0.0, 0.05, 50);
  const auto G = row_gradients(c.grid(), P.matrix);
  for (Eigen::Index i = 0; i < P.matrix.rows(); ++i)
    EXPECT_EQ(detail::row_diff_l1(G, i, G, i, 1, c.grid().h()), 0.0);
  IntegralBoundsOptions opt;
  opt.times = {0.05};
  const auto k = integral_bound_constants(c, opt);
  EXPECT_EQ(k.C2, 0.0);  // needs two distinct times
}

TEST(IntegralBounds, AnchoredSweepAgreesWithStaticStreaming) {
  const auto c = build_coefficients(TorusGrid(1, 32), "1", "1", "0");
  IntegralBoundsOptions opt;
  opt.times = {0.01, 0.02, 0.04, 0.08};
  opt.dt = 1e-3;
  const auto s = integral_bound_constants(c, opt);
  opt.force_anchored = true;
  const auto a = integral_bound_constants(c, opt);
  EXPECT_NEAR(a.C1 / s.C1, 1.0, 0.05);
  EXPECT_NEAR(a.C2 / s.C2, 1.0, 0.05);
  EXPECT_NEAR(a.C3 / s.C3, 1.0, 1e-9);
}

TEST(IntegralBounds, TimeDependentPiRuns) {
  const auto c = build_coefficients(TorusGrid(1, 32), "1", "1 + 0.5*sin(2*pi*(x1 + t))", "0");
  IntegralBoundsOptions opt;
  opt.times = {0.02, 0.05, 0.1};
  const auto k = integral_bound_constants(c, opt);
  EXPECT_TRUE(std::isfinite(k.C1) && k.C1 > 0.0);
  EXPECT_TRUE(std::isfinite(k.C2) && k.C2 > 0.0);
  EXPECT_TRUE(std::isfinite(k.C3) && k.C3 > 0.0);
  opt.times = {0.5, 2.0};
  EXPECT_THROW(integral_bound_constants(c, opt), PreconditionError);
}
