#pragma once

// Benchmark systems: 2-state spiral, ballistic point mass with quadratic
// drag, and a 12-state quadrotor. The quadrotor core is scalar-generic so
// the same expressions run on doubles and on dual numbers.
//
// Axes conventions:
//   - Quadrotor: NED-style world frame, z points DOWN. Gravity enters v_dot
//     as +g*e3; thrust along the body z axis enters as -(T/m)*R*e3, so hover
//     is T = m*g at level attitude. Euler angles are roll-pitch-yaw (ZYX),
//     R maps body to world.
//   - Ballistic system: z points UP; gravity is [0,0,-g].

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>

#include "fnn/util/dual.hpp"
#include "fnn/util/errors.hpp"

namespace fnn {

using Eigen::Matrix3d;
using Eigen::Matrix4d;
using Eigen::Vector3d;
using Eigen::Vector4d;
using Eigen::VectorXd;

// --- spiral ------------------------------------------------------------

struct SpiralParams {
  double omega = 2.0;
  double eta = 0.1;
  double epsilon = 0.0;
};

inline Eigen::Vector2d spiral_deriv(const SpiralParams& p, const Eigen::Vector2d& x) {
  return {-p.eta * x(0) + p.omega * x(1) + p.epsilon,
          -p.omega * x(0) - p.eta * x(1) + p.epsilon};
}

// Randomized training family: 20 cases sweeping all three parameters
// jointly from slow/contracting/negative-bias to fast/expanding/positive.
inline SpiralParams spiral_randomized_case(int i) {
  require(i >= 0 && i < 20, "spiral_randomized_case: index out of range");
  return {0.8 + 0.12 * i, 0.04 + 0.005 * i, -24.0 + 2.4 * i};
}

// Evaluation ladder of 10 uncertainty levels; level 3 is the nominal system
// (omega=2, eta=0.1, epsilon=0).
inline SpiralParams spiral_uncertainty_level(int j) {
  require(j >= 0 && j < 10, "spiral_uncertainty_level: index out of range");
  return {0.8 + 0.4 * j, 0.04 + 0.02 * j, -24.0 + 8.0 * j};
}

// 12 held-out systems: each parameter lies inside the training sweep, but
// the triples combine sweep positions (i+4, i+6, i+4) that never co-occur
// in spiral_randomized_case, so every case is unseen jointly.
inline SpiralParams spiral_holdout_case(int i) {
  require(i >= 0 && i < 12, "spiral_holdout_case: index out of range");
  return {1.28 + 0.12 * i, 0.07 + 0.005 * i, -14.4 + 2.4 * i};
}

// --- ballistic point mass ----------------------------------------------

struct BallisticParams {
  double mass = 0.1;            // kg
  Vector3d drag_coeff{0.01, 0.01, 0.01};  // quadratic drag, per axis
  double gravity = 9.81;
};

// State [p, v], z up. Quadratic drag keeps the learnable residual genuinely
// nonlinear in v.
inline VectorXd ballistic_deriv(const BallisticParams& p, const VectorXd& x) {
  require(x.size() == 6, "ballistic_deriv: state must be 6-dimensional");
  Vector3d v = x.tail<3>();
  Vector3d a = Vector3d(0.0, 0.0, -p.gravity) -
               (1.0 / p.mass) * p.drag_coeff.cwiseProduct(v) * v.norm();
  VectorXd dx(6);
  dx << v, a;
  return dx;
}

// --- quadrotor ----------------------------------------------------------

struct QuadParams {
  double mass = 1.0;                     // kg
  Vector3d inertia{0.01, 0.01, 0.02};    // diagonal of J, kg m^2
  Matrix4d alloc;                        // motor thrusts -> [T, tau_x, tau_y, tau_z]
  Vector3d drag{0.6, 0.6, 0.1};          // diagonal of body-frame drag matrix D
  double gravity = 9.81;
  Vector3d disturbance{0.0, 0.0, 0.0};   // constant world-frame force, N
};

// X configuration, arm length 0.15 m, yaw torque coefficient 0.01 m.
// Motor order: front-left, front-right, rear-right, rear-left.
inline QuadParams make_quad_params() {
  QuadParams p;
  double d = 0.15 / std::sqrt(2.0);
  double c = 0.01;
  p.alloc << 1, 1, 1, 1,
             d, -d, -d, d,
             d, d, -d, -d,
             c, -c, c, -c;
  return p;
}

// Motor thrusts realizing a wrench [T, tau].
inline Vector4d quad_thrusts_from_wrench(const QuadParams& p, double T, const Vector3d& tau) {
  Vector4d w;
  w << T, tau(0), tau(1), tau(2);
  return p.alloc.inverse() * w;
}

inline Vector4d quad_hover_input(const QuadParams& p) {
  return quad_thrusts_from_wrench(p, p.mass * p.gravity, Vector3d::Zero());
}

inline constexpr double kPitchGuard = M_PI / 2.0 - 1e-3;

// State layout: [p(3), v(3), roll pitch yaw, body rates(3)].
// Scalar-generic so dual numbers can carry exact Jacobians through the
// closed loop. Throws on the Euler-rate singularity.
template <typename T>
std::array<T, 12> quad_deriv_core(const QuadParams& qp, const std::array<T, 12>& x,
                                  const std::array<T, 4>& u) {
  using std::cos;
  using std::sin;
  const T& roll = x[6];
  const T& pitch = x[7];
  const T& yaw = x[8];
  if (!(std::abs(value(pitch)) < kPitchGuard))
    throw NumericError("pitch outside Euler-rate singularity guard");

  T cph = cos(roll), sph = sin(roll);
  T cth = cos(pitch), sth = sin(pitch);
  T cps = cos(yaw), sps = sin(yaw);

  // R body->world, ZYX.
  T r00 = cps * cth, r01 = cps * sth * sph - sps * cph, r02 = cps * sth * cph + sps * sph;
  T r10 = sps * cth, r11 = sps * sth * sph + cps * cph, r12 = sps * sth * cph - cps * sph;
  T r20 = -sth, r21 = cth * sph, r22 = cth * cph;

  // Wrench from motor thrusts.
  T thrust(0.0), tx(0.0), ty(0.0), tz(0.0);
  for (int j = 0; j < 4; ++j) {
    thrust += T(qp.alloc(0, j)) * u[j];
    tx += T(qp.alloc(1, j)) * u[j];
    ty += T(qp.alloc(2, j)) * u[j];
    tz += T(qp.alloc(3, j)) * u[j];
  }

  // Body-frame aerodynamic drag D * (R^T v), rotated back to world.
  T vb0 = r00 * x[3] + r10 * x[4] + r20 * x[5];
  T vb1 = r01 * x[3] + r11 * x[4] + r21 * x[5];
  T vb2 = r02 * x[3] + r12 * x[4] + r22 * x[5];
  T fb0 = T(qp.drag(0)) * vb0, fb1 = T(qp.drag(1)) * vb1, fb2 = T(qp.drag(2)) * vb2;
  T fa0 = r00 * fb0 + r01 * fb1 + r02 * fb2;
  T fa1 = r10 * fb0 + r11 * fb1 + r12 * fb2;
  T fa2 = r20 * fb0 + r21 * fb1 + r22 * fb2;

  double inv_m = 1.0 / qp.mass;
  std::array<T, 12> dx;
  dx[0] = x[3];
  dx[1] = x[4];
  dx[2] = x[5];
  dx[3] = -inv_m * thrust * r02 - inv_m * fa0 + T(qp.disturbance(0) * inv_m);
  dx[4] = -inv_m * thrust * r12 - inv_m * fa1 + T(qp.disturbance(1) * inv_m);
  dx[5] = T(qp.gravity) - inv_m * thrust * r22 - inv_m * fa2 + T(qp.disturbance(2) * inv_m);

  // Euler-rate map, ZYX.
  T tth = sth / cth;
  const T& wx = x[9];
  const T& wy = x[10];
  const T& wz = x[11];
  dx[6] = wx + sph * tth * wy + cph * tth * wz;
  dx[7] = cph * wy - sph * wz;
  dx[8] = (sph / cth) * wy + (cph / cth) * wz;

  // Diagonal inertia: J w_dot = tau - w x (J w).
  double jx = qp.inertia(0), jy = qp.inertia(1), jz = qp.inertia(2);
  dx[9] = (tx - (jz - jy) * wy * wz) / jx;
  dx[10] = (ty - (jx - jz) * wz * wx) / jy;
  dx[11] = (tz - (jy - jx) * wx * wy) / jz;
  return dx;
}

inline VectorXd quad_deriv(const QuadParams& qp, const VectorXd& x, const VectorXd& u) {
  require(x.size() == 12, "quad_deriv: state must be 12-dimensional");
  require(u.size() == 4, "quad_deriv: input must be 4 motor thrusts");
  std::array<double, 12> xs;
  std::array<double, 4> us;
  for (int i = 0; i < 12; ++i) xs[i] = x(i);
  for (int i = 0; i < 4; ++i) us[i] = u(i);
  auto dxs = quad_deriv_core(qp, xs, us);
  VectorXd dx(12);
  for (int i = 0; i < 12; ++i) dx(i) = dxs[i];
  return dx;
}

// --- uncertainty injection ----------------------------------------------

struct UncertaintySpec {
  double mass_rel = 0.0;                  // relative perturbations
  Vector3d inertia_rel{0.0, 0.0, 0.0};
  Vector3d drag_rel{0.0, 0.0, 0.0};
  Vector3d disturbance{0.0, 0.0, 0.0};    // additive world-frame force, N
};

inline QuadParams apply_uncertainty(const QuadParams& nominal, const UncertaintySpec& s) {
  QuadParams p = nominal;
  p.mass = nominal.mass * (1.0 + s.mass_rel);
  if (p.mass <= 0.0) throw ConfigError("apply_uncertainty: perturbed mass not positive");
  p.inertia = nominal.inertia.cwiseProduct(Vector3d::Ones() + s.inertia_rel);
  p.drag = nominal.drag.cwiseProduct(Vector3d::Ones() + s.drag_rel);
  p.disturbance = nominal.disturbance + s.disturbance;
  return p;
}

inline BallisticParams apply_uncertainty(const BallisticParams& nominal,
                                         const UncertaintySpec& s) {
  BallisticParams p = nominal;
  p.mass = nominal.mass * (1.0 + s.mass_rel);
  if (p.mass <= 0.0) throw ConfigError("apply_uncertainty: perturbed mass not positive");
  p.drag_coeff = nominal.drag_coeff.cwiseProduct(Vector3d::Ones() + s.drag_rel);
  return p;
}

}  // namespace fnn
