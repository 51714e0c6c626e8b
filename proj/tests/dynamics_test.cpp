#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "fnn/dynamics.hpp"
#include "fnn/integrate.hpp"
#include "fnn/util/dual.hpp"

namespace {

using Eigen::Matrix2d;
using Eigen::Vector2d;
using Eigen::Vector3d;
using Eigen::Vector4d;
using Eigen::VectorXd;
using namespace fnn;

// Closed form: x(t) = e^{-eta t} R(omega t) (x0 - x_eq) + x_eq with
// R a clockwise rotation and x_eq the equilibrium of the affine field.
Vector2d spiral_closed_form(const SpiralParams& p, const Vector2d& x0, double t) {
  Matrix2d A;
  A << -p.eta, p.omega, -p.omega, -p.eta;
  Vector2d x_eq = A.colPivHouseholderQr().solve(Vector2d(-p.epsilon, -p.epsilon));
  double c = std::cos(p.omega * t), s = std::sin(p.omega * t);
  Matrix2d R;
  R << c, s, -s, c;
  return std::exp(-p.eta * t) * R * (x0 - x_eq) + x_eq;
}

TEST(Spiral, Rk4MatchesClosedForm) {
  for (SpiralParams p : {SpiralParams{}, SpiralParams{3.0, -0.05, 10.0}}) {
    Vector2d x0(9.0, 0.0);
    auto f = [&p](const VectorXd& x, const VectorXd&, double) {
      return VectorXd(spiral_deriv(p, x));
    };
    Trajectory t = rollout(f, x0, no_input, 0.0, 1e-3, 2000, Method::RK4);
    Vector2d ref = spiral_closed_form(p, x0, 2.0);
    EXPECT_LT((t.states.back() - ref).norm(), 1e-9);
  }
}

TEST(Spiral, SignConventions) {
  // Positive eta contracts toward the equilibrium, negative eta expands.
  Vector2d x0(9.0, 0.0);
  SpiralParams contracting{2.0, 0.1, 0.0};
  SpiralParams expanding{3.0, -0.05, 10.0};
  EXPECT_LT(spiral_closed_form(contracting, x0, 10.0).norm(), x0.norm());
  Matrix2d A;
  A << -expanding.eta, expanding.omega, -expanding.omega, -expanding.eta;
  Vector2d x_eq = A.colPivHouseholderQr().solve(Vector2d(-10.0, -10.0));
  EXPECT_GT((spiral_closed_form(expanding, x0, 10.0) - x_eq).norm(), (x0 - x_eq).norm());
  // Equilibrium of the derivative field is a fixed point.
  EXPECT_LT(spiral_deriv(expanding, x_eq).norm(), 1e-12);
}

TEST(Spiral, CaseFamilies) {
  SpiralParams lo = spiral_randomized_case(0), hi = spiral_randomized_case(19);
  EXPECT_DOUBLE_EQ(lo.omega, 0.8);
  EXPECT_DOUBLE_EQ(lo.eta, 0.04);
  EXPECT_DOUBLE_EQ(lo.epsilon, -24.0);
  EXPECT_DOUBLE_EQ(hi.omega, 3.08);
  EXPECT_DOUBLE_EQ(hi.eta, 0.135);
  EXPECT_NEAR(hi.epsilon, 21.6, 1e-12);

  SpiralParams nominal = spiral_uncertainty_level(3);
  EXPECT_DOUBLE_EQ(nominal.omega, 2.0);
  EXPECT_DOUBLE_EQ(nominal.eta, 0.1);
  EXPECT_DOUBLE_EQ(nominal.epsilon, 0.0);

  // Held-out triples sit inside the training sweep but never coincide with it.
  std::set<std::array<double, 3>> seen;
  for (int i = 0; i < 20; ++i) {
    SpiralParams p = spiral_randomized_case(i);
    seen.insert({p.omega, p.eta, p.epsilon});
  }
  for (int i = 0; i < 12; ++i) {
    SpiralParams p = spiral_holdout_case(i);
    EXPECT_GE(p.omega, lo.omega);
    EXPECT_LE(p.omega, hi.omega);
    EXPECT_GE(p.eta, lo.eta);
    EXPECT_LE(p.eta, hi.eta);
    EXPECT_GE(p.epsilon, lo.epsilon);
    EXPECT_LE(p.epsilon, hi.epsilon + 1e-12);
    EXPECT_EQ(seen.count({p.omega, p.eta, p.epsilon}), 0u);
  }

  EXPECT_THROW(spiral_randomized_case(20), std::invalid_argument);
  EXPECT_THROW(spiral_uncertainty_level(-1), std::invalid_argument);
  EXPECT_THROW(spiral_holdout_case(12), std::invalid_argument);
}

TEST(Ballistic, GravityAndQuadraticDrag) {
  BallisticParams p;
  VectorXd rest = VectorXd::Zero(6);
  VectorXd d = ballistic_deriv(p, rest);
  EXPECT_EQ(d.head<3>().norm(), 0.0);
  EXPECT_EQ(d(3), 0.0);
  EXPECT_EQ(d(4), 0.0);
  EXPECT_DOUBLE_EQ(d(5), -p.gravity);

  VectorXd moving = rest;
  moving(3) = 2.0;
  VectorXd d1 = ballistic_deriv(p, moving);
  double drag1 = -(d1(3));  // opposes +x motion
  EXPECT_GT(drag1, 0.0);
  moving(3) = 4.0;
  VectorXd d2 = ballistic_deriv(p, moving);
  EXPECT_NEAR(-(d2(3)) / drag1, 4.0, 1e-12);
  EXPECT_THROW(ballistic_deriv(p, VectorXd::Zero(5)), std::invalid_argument);
}

TEST(Quad, HoverIsEquilibrium) {
  QuadParams p = make_quad_params();
  VectorXd x = VectorXd::Zero(12);
  Vector4d u = quad_hover_input(p);
  EXPECT_NEAR(u.sum(), p.mass * p.gravity, 1e-12);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(u(i), p.mass * p.gravity / 4.0, 1e-12);
  VectorXd dx = quad_deriv(p, x, u);
  EXPECT_LT(dx.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Quad, GravityPointsDownInBodyZDownFrame) {
  QuadParams p = make_quad_params();
  VectorXd x = VectorXd::Zero(12);
  VectorXd dx = quad_deriv(p, x, Vector4d::Zero());
  // z grows downward, so free fall accelerates in +z.
  EXPECT_DOUBLE_EQ(dx(5), p.gravity);
}

TEST(Quad, AllocationRoundTripAndTorques) {
  QuadParams p = make_quad_params();
  Vector3d tau(0.02, -0.01, 0.005);
  Vector4d u = quad_thrusts_from_wrench(p, 11.0, tau);
  Vector4d wrench = p.alloc * u;
  EXPECT_NEAR(wrench(0), 11.0, 1e-12);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(wrench(1 + i), tau(i), 1e-12);

  // Pure torque input produces the matching angular acceleration at rest.
  VectorXd x = VectorXd::Zero(12);
  VectorXd dx = quad_deriv(p, x, quad_thrusts_from_wrench(p, 0.0, tau));
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(dx(9 + i), tau(i) / p.inertia(i), 1e-9);
}

TEST(Quad, BodyDragOpposesVelocity) {
  QuadParams p = make_quad_params();
  VectorXd x = VectorXd::Zero(12);
  x(3) = 1.5;  // level attitude: body x drag acts along world x
  VectorXd dx = quad_deriv(p, x, quad_hover_input(p));
  EXPECT_NEAR(dx(3), -p.drag(0) * 1.5 / p.mass, 1e-12);
}

TEST(Quad, PitchGuardThrows) {
  QuadParams p = make_quad_params();
  VectorXd x = VectorXd::Zero(12);
  x(7) = M_PI / 2.0;
  EXPECT_THROW(quad_deriv(p, x, quad_hover_input(p)), NumericError);
  x(7) = kPitchGuard - 1e-6;
  EXPECT_NO_THROW(quad_deriv(p, x, quad_hover_input(p)));
  EXPECT_THROW(quad_deriv(p, VectorXd::Zero(11), quad_hover_input(p)),
               std::invalid_argument);
  EXPECT_THROW(quad_deriv(p, VectorXd::Zero(12), Vector3d::Zero()),
               std::invalid_argument);
}

TEST(Quad, DualPathMatchesDoublePath) {
  using D = Dual<16>;
  QuadParams p = make_quad_params();
  std::array<double, 12> xs{};
  std::array<double, 4> us{};
  Eigen::VectorXd xv(12);
  for (int i = 0; i < 12; ++i) {
    xs[i] = 0.05 * (i + 1);
    xv(i) = xs[i];
  }
  xs[7] = xv(7) = 0.3;
  Vector4d uh = quad_hover_input(p);
  for (int i = 0; i < 4; ++i) us[i] = uh(i);
  std::array<D, 12> xd;
  std::array<D, 4> ud;
  for (int i = 0; i < 12; ++i) xd[i] = D::seeded(xs[i], i);
  for (int i = 0; i < 4; ++i) ud[i] = D::seeded(us[i], 12 + i);
  auto ref = quad_deriv(p, xv, uh);
  auto dual = quad_deriv_core(p, xd, ud);
  for (int i = 0; i < 12; ++i) EXPECT_EQ(dual[i].v, ref(i));
}

TEST(Uncertainty, RelativePerturbationsApply) {
  UncertaintySpec s;
  s.mass_rel = 0.376;
  s.inertia_rel = Vector3d(0.4, 0.4, 0.0);
  s.drag_rel = Vector3d(0.143, 0.143, 0.25);
  s.disturbance = Vector3d(0.3, 0.3, 0.3);
  QuadParams q = apply_uncertainty(make_quad_params(), s);
  EXPECT_DOUBLE_EQ(q.mass, 1.376);
  EXPECT_DOUBLE_EQ(q.inertia(0), 0.014);
  EXPECT_DOUBLE_EQ(q.inertia(2), 0.02);
  EXPECT_NEAR(q.drag(0), 0.6 * 1.143, 1e-12);
  EXPECT_NEAR(q.drag(2), 0.1 * 1.25, 1e-12);
  EXPECT_DOUBLE_EQ(q.disturbance(1), 0.3);

  BallisticParams b = apply_uncertainty(BallisticParams{}, s);
  EXPECT_NEAR(b.mass, 0.1 * 1.376, 1e-15);

  UncertaintySpec bad;
  bad.mass_rel = -1.0;
  EXPECT_THROW(apply_uncertainty(make_quad_params(), bad), ConfigError);
}

}  // namespace
