#pragma once

// Quadrotor control stack: analytic flat references, a differential-flatness
// cascade controller (scalar-generic so training can differentiate through
// it), the closed-loop residual-learning model, a single-shooting MPC with a
// persistent corrected prediction buffer, and the flight simulator.
//
// World frame is z-down (see dynamics.hpp). A reference altitude of +1 m in
// these coordinates simply fixes the flight plane; only relative tracking
// error matters anywhere.

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "fnn/adjoint.hpp"
#include "fnn/dynamics.hpp"
#include "fnn/integrate.hpp"
#include "fnn/mlp.hpp"
#include "fnn/observer.hpp"
#include "fnn/util/csv.hpp"
#include "fnn/util/errors.hpp"
#include "fnn/util/rng.hpp"

namespace fnn {

// --- flat references -------------------------------------------------------

struct FlatRefSample {
  Vector3d p{0, 0, 0};
  Vector3d v{0, 0, 0};
  Vector3d a{0, 0, 0};
  Vector3d j{0, 0, 0};
};

struct LissajousParams {
  double rx = 3.0, ry = 3.0, rz = 0.5;
  double Tx = 6.0, Ty = 3.0, Tz = 3.0;
  double h = 0.5;
};

inline FlatRefSample lissajous_ref(double t, const LissajousParams& lp = {}) {
  require(t >= 0.0, "lissajous_ref: t must be >= 0");
  double wx = 2.0 * M_PI / lp.Tx, wy = 2.0 * M_PI / lp.Ty, wz = 2.0 * M_PI / lp.Tz;
  FlatRefSample r;
  r.p << lp.rx * std::sin(wx * t), lp.ry * std::sin(wy * t), lp.h + lp.rz * std::cos(wz * t);
  r.v << lp.rx * wx * std::cos(wx * t), lp.ry * wy * std::cos(wy * t),
      -lp.rz * wz * std::sin(wz * t);
  r.a << -lp.rx * wx * wx * std::sin(wx * t), -lp.ry * wy * wy * std::sin(wy * t),
      -lp.rz * wz * wz * std::cos(wz * t);
  r.j << -lp.rx * wx * wx * wx * std::cos(wx * t), -lp.ry * wy * wy * wy * std::cos(wy * t),
      lp.rz * wz * wz * wz * std::sin(wz * t);
  return r;
}

// Horizontal circle, used by the controller regression test and as a simple
// flight task.
inline FlatRefSample circle_ref(double t, double radius, double period, double alt) {
  double w = 2.0 * M_PI / period;
  FlatRefSample r;
  r.p << radius * std::sin(w * t), radius * (1.0 - std::cos(w * t)), alt;
  r.v << radius * w * std::cos(w * t), radius * w * std::sin(w * t), 0.0;
  r.a << -radius * w * w * std::sin(w * t), radius * w * w * std::cos(w * t), 0.0;
  r.j << -radius * w * w * w * std::cos(w * t), -radius * w * w * w * std::sin(w * t), 0.0;
  return r;
}

// Seeded smooth excitation for training-data flights: per axis a sum of three
// sinusoids with randomized amplitude, frequency and phase, analytic
// derivatives throughout. A cosine ramp-in keeps the flight starting exactly
// at rest; amplitude/frequency budgets keep demanded thrust well inside the
// motor box and tilt far from the Euler-rate guard.
struct SumOfSinesRef {
  std::array<std::array<double, 3>, 9> amp_freq_phase;  // per axis x3 terms: [A, w, phi]
  Vector3d offset{0, 0, 1.0};
  double ramp = 2.0;

  static SumOfSinesRef make(std::uint64_t seed) {
    Rng rng(seed);
    SumOfSinesRef ref;
    for (int axis = 0; axis < 3; ++axis) {
      for (int k = 0; k < 3; ++k) {
        double amp = (axis == 2 ? 0.3 : 0.9) * rng.uniform(0.4, 1.0) / (k + 1);
        double freq = 2.0 * M_PI * rng.uniform(0.05, 0.12) * (k + 1);
        double phase = rng.uniform(0.0, 2.0 * M_PI);
        ref.amp_freq_phase[axis * 3 + k] = {amp, freq, phase};
      }
    }
    return ref;
  }

  FlatRefSample at(double t) const {
    // Envelope value and derivatives: 0.5*(1-cos(pi*t/ramp)) rising to 1.
    double e = 1.0, e1 = 0.0, e2 = 0.0, e3 = 0.0;
    if (t < ramp) {
      double w = M_PI / ramp, u = w * t;
      e = 0.5 * (1.0 - std::cos(u));
      e1 = 0.5 * w * std::sin(u);
      e2 = 0.5 * w * w * std::cos(u);
      e3 = -0.5 * w * w * w * std::sin(u);
    }
    FlatRefSample r;
    r.p = offset;
    for (int axis = 0; axis < 3; ++axis) {
      double d = 0.0, d1 = 0.0, d2 = 0.0, d3 = 0.0;
      for (int k = 0; k < 3; ++k) {
        const auto& [A, w, phi] = amp_freq_phase[axis * 3 + k];
        double s = std::sin(w * t + phi), c = std::cos(w * t + phi);
        // Subtract the t=0 offset so every flight starts at `offset`.
        d += A * (s - std::sin(phi));
        d1 += A * w * c;
        d2 += -A * w * w * s;
        d3 += -A * w * w * w * c;
      }
      r.p(axis) += e * d;
      r.v(axis) = e1 * d + e * d1;
      r.a(axis) = e2 * d + 2.0 * e1 * d1 + e * d2;
      r.j(axis) = e3 * d + 3.0 * e2 * d1 + 3.0 * e1 * d2 + e * d3;
    }
    return r;
  }
};

// --- differential-flatness cascade controller -------------------------------

struct DfbcGains {
  double kp = 6.0;
  double ki = 0.5;
  double kd = 4.0;
  double kR = 120.0;  // attitude P, to angular acceleration
  double kw = 16.0;   // body-rate damping
  double integ_clamp = 1.0;
};

template <typename T>
struct DfbcOut {
  std::array<T, 4> u;
  std::array<T, 3> integ_dot;
};

// Position PID -> desired thrust vector -> tilt angles (zero yaw) -> attitude
// PD -> torques -> allocated, box-clamped motor thrusts. Scalar-generic so
// closed-loop training can differentiate through the whole cascade; the box
// clamps and anti-windup switch on values (subgradient 0 at the kinks).
template <typename T>
DfbcOut<T> dfbc_control_core(const QuadParams& qp, const DfbcGains& g,
                             const std::array<T, 12>& x, const std::array<T, 3>& integ,
                             const FlatRefSample& ref, double u_lo = 0.0, double u_hi = 4.0) {
  using std::asin;
  using std::atan2;
  using std::sqrt;

  std::array<T, 3> e_p, e_v, a_des, F;
  for (int i = 0; i < 3; ++i) {
    e_p[i] = T(ref.p(i)) - x[i];
    e_v[i] = T(ref.v(i)) - x[3 + i];
    a_des[i] = T(ref.a(i)) + T(g.kp) * e_p[i] + T(g.kd) * e_v[i] + T(g.ki) * integ[i];
  }
  // v_dot = g*e3 - (T/m) R e3  =>  thrust vector F = m*(g*e3 - a_des).
  F[0] = T(-qp.mass) * a_des[0];
  F[1] = T(-qp.mass) * a_des[1];
  F[2] = T(qp.mass) * (T(qp.gravity) - a_des[2]);

  T thrust = sqrt(F[0] * F[0] + F[1] * F[1] + F[2] * F[2]) + T(1e-12);
  T roll_des = asin(clamp(T(-1.0) * F[1] / thrust, -0.99, 0.99));
  T pitch_des = atan2(F[0], F[2]);

  std::array<T, 3> att_err = {roll_des - x[6], pitch_des - x[7], T(0.0) - x[8]};
  const T& wx = x[9];
  const T& wy = x[10];
  const T& wz = x[11];
  double jx = qp.inertia(0), jy = qp.inertia(1), jz = qp.inertia(2);
  // tau = J*(kR*e_att - kw*w) + w x Jw.
  T tau_x = T(jx) * (T(g.kR) * att_err[0] - T(g.kw) * wx) + (jz - jy) * wy * wz;
  T tau_y = T(jy) * (T(g.kR) * att_err[1] - T(g.kw) * wy) + (jx - jz) * wz * wx;
  T tau_z = T(jz) * (T(g.kR) * att_err[2] - T(g.kw) * wz) + (jy - jx) * wx * wy;

  Matrix4d inv_alloc = qp.alloc.inverse();
  DfbcOut<T> out;
  for (int m = 0; m < 4; ++m) {
    T ui = T(inv_alloc(m, 0)) * thrust + T(inv_alloc(m, 1)) * tau_x +
           T(inv_alloc(m, 2)) * tau_y + T(inv_alloc(m, 3)) * tau_z;
    out.u[m] = clamp(ui, u_lo, u_hi);
  }
  // Conditional integration anti-windup: hold the integrator once it is at
  // its clamp and the error would push it further out.
  for (int i = 0; i < 3; ++i) {
    double zi = value(integ[i]);
    double ei = value(e_p[i]);
    bool frozen = (zi >= g.integ_clamp && ei > 0.0) || (zi <= -g.integ_clamp && ei < 0.0);
    out.integ_dot[i] = frozen ? T(0.0) : e_p[i];
  }
  return out;
}

inline Vector4d dfbc_control(const QuadParams& qp, const DfbcGains& g, const VectorXd& x,
                             Vector3d& integ, const FlatRefSample& ref, double Ts) {
  require(x.size() == 12, "dfbc_control: state must be 12-dimensional");
  std::array<double, 12> xs;
  for (int i = 0; i < 12; ++i) xs[i] = x(i);
  std::array<double, 3> zs = {integ(0), integ(1), integ(2)};
  DfbcOut<double> out = dfbc_control_core(qp, g, xs, zs, ref);
  for (int i = 0; i < 3; ++i) integ(i) += Ts * out.integ_dot[i];
  return Vector4d(out.u[0], out.u[1], out.u[2], out.u[3]);
}

// --- residual-augmented quadrotor model -------------------------------------

// Residual network input: [v, Theta]; output: 3 translational acceleration
// corrections added to v_dot.
template <typename T>
std::array<T, 6> residual_input(const std::array<T, 12>& x) {
  return {x[3], x[4], x[5], x[6], x[7], x[8]};
}

template <typename T>
std::array<T, 12> quad_residual_deriv_core(const QuadParams& qp, const MlpNet* net,
                                           const std::array<T, 12>& x,
                                           const std::array<T, 4>& u) {
  std::array<T, 12> dx = quad_deriv_core(qp, x, u);
  if (net != nullptr) {
    std::array<T, 6> s = residual_input(x);
    std::vector<T> in(s.begin(), s.end());
    std::vector<T> r = mlp_forward_generic(*net, in);
    dx[3] += r[0];
    dx[4] += r[1];
    dx[5] += r[2];
  }
  return dx;
}

// Closed-loop one-step model for residual training: 15-dim state
// [quad state(12), position-error integral(3)]; each step runs the cascade
// controller on the model's own state against a recorded reference schedule,
// then integrates nominal dynamics plus the learnable residual. Parameters
// are the residual net's weights.
class QuadClosedLoopModel {
 public:
  static constexpr int kStateDim = 15;
  using D = Dual<16>;  // 15 state channels; channel 15 unused

  QuadClosedLoopModel(const QuadParams& model_params, const DfbcGains& gains, MlpNet& net,
                      std::vector<FlatRefSample> refs, double Ts)
      : params_(model_params),
        gains_(gains),
        net_(net),
        refs_(std::move(refs)),
        Ts_(Ts),
        grads_(MlpGrads::zeros_like(net)) {}

  VectorXd step(const VectorXd& X, int k) const {
    require(k < static_cast<int>(refs_.size()), "QuadClosedLoopModel: reference table too short");
    std::array<double, 12> x;
    std::array<double, 3> z;
    split(X, x, z);
    DfbcOut<double> ctrl = dfbc_control_core(params_, gains_, x, z, refs_[k]);
    auto dx = quad_residual_deriv_core(params_, &net_, x, ctrl.u);
    VectorXd Xn(kStateDim);
    for (int i = 0; i < 12; ++i) Xn(i) = X(i) + Ts_ * dx[i];
    for (int i = 0; i < 3; ++i) Xn(12 + i) = X(12 + i) + Ts_ * ctrl.integ_dot[i];
    return Xn;
  }

  VectorXd step_vjp(const VectorXd& X, int k, const VectorXd& lambda_next) {
    // State Jacobian via one dual pass through controller + dynamics + net.
    std::array<D, 12> x;
    std::array<D, 3> z;
    for (int i = 0; i < 12; ++i) x[i] = D::seeded(X(i), i);
    for (int i = 0; i < 3; ++i) z[i] = D::seeded(X(12 + i), 12 + i);
    DfbcOut<D> ctrl = dfbc_control_core(params_, gains_, x, z, refs_[k]);
    auto dx = quad_residual_deriv_core(params_, &net_, x, ctrl.u);

    VectorXd pullback = VectorXd::Zero(kStateDim);
    for (int c = 0; c < kStateDim; ++c) {
      double acc = lambda_next(c);  // identity part of X + Ts*f
      for (int r = 0; r < 12; ++r) acc += Ts_ * dx[r].d[c] * lambda_next(r);
      for (int r = 0; r < 3; ++r) acc += Ts_ * ctrl.integ_dot[r].d[c] * lambda_next(12 + r);
      pullback(c) = acc;
    }

    // Parameter VJP: the net only enters v_dot additively, so one backward
    // pass with the Ts-scaled velocity costate suffices.
    std::array<double, 12> xv;
    std::array<double, 3> zv;
    split(X, xv, zv);
    VectorXd in(6);
    auto s = residual_input(xv);
    for (int i = 0; i < 6; ++i) in(i) = s[i];
    VectorXd out_grad = Ts_ * lambda_next.segment(3, 3);
    grads_.add_scaled(mlp_backward(net_, in, out_grad).grads, 1.0);
    return pullback;
  }

  void zero_grad() { grads_ = MlpGrads::zeros_like(net_); }
  const MlpGrads& grads() const { return grads_; }

 private:
  static void split(const VectorXd& X, std::array<double, 12>& x, std::array<double, 3>& z) {
    for (int i = 0; i < 12; ++i) x[i] = X(i);
    for (int i = 0; i < 3; ++i) z[i] = X(12 + i);
  }

  QuadParams params_;
  DfbcGains gains_;
  MlpNet& net_;
  std::vector<FlatRefSample> refs_;
  double Ts_;
  MlpGrads grads_;
};

// --- MPC ---------------------------------------------------------------------

enum class PredictorKind {
  Nominal,          // drag-free rigid-body model only
  NeuralOde,        // nominal + adjoint-trained residual net
  Mlp,              // nominal + single-step-trained residual net
  NominalFeedback,  // nominal + decayed linear correction
  AdaptiveNn,       // nominal + residual net with adapting head, no linear term
  FeedbackNn,       // nominal + residual net + decayed linear correction
  AdaptiveFeedbackNn  // nominal + adapting-head net + decayed linear correction
};

inline bool predictor_uses_net(PredictorKind k) {
  return k == PredictorKind::NeuralOde || k == PredictorKind::Mlp ||
         k == PredictorKind::AdaptiveNn || k == PredictorKind::FeedbackNn ||
         k == PredictorKind::AdaptiveFeedbackNn;
}

inline bool predictor_uses_correction(PredictorKind k) {
  return k == PredictorKind::NominalFeedback || k == PredictorKind::FeedbackNn ||
         k == PredictorKind::AdaptiveFeedbackNn;
}

inline bool predictor_adapts(PredictorKind k) {
  return k == PredictorKind::AdaptiveNn || k == PredictorKind::AdaptiveFeedbackNn;
}

struct MpcConfig {
  int horizon = 10;
  VectorXd q_diag = (VectorXd(12) << 100, 100, 100, 50, 50, 50, 50, 50, 50, 1, 1, 1).finished();
  VectorXd r_diag = VectorXd::Ones(4);
  double u_lo = 0.0, u_hi = 4.0;
  int iterations = 30;
  double att_penalty_weight = 1e3;
  // Penalty threshold sits inside the Euler-singularity guard so the solver
  // is pushed back before a rollout can throw.
  double att_limit = 1.4;
  PredictorKind kind = PredictorKind::Nominal;
  double feedback_gain = 3.0;  // L = feedback_gain * I12
  double beta = 0.1;
  double adapt_gamma = 50.0;  // adaptive-head learning gain
  double Ts = 0.02;
};

// Tracking loss plus a one-sided quadratic penalty on the Euler angles.
struct MpcStageLoss {
  QuadraticLoss track;
  double att_weight = 0.0;
  double att_limit = 1.4;

  int horizon() const { return track.horizon(); }

  double value(int k, const VectorXd& x) const {
    double J = track.value(k, x);
    for (int i = 6; i < 9; ++i) {
      double over = std::abs(x(i)) - att_limit;
      if (over > 0.0) J += att_weight * over * over;
    }
    return J;
  }

  VectorXd grad(int k, const VectorXd& x) const {
    VectorXd g = track.grad(k, x);
    for (int i = 6; i < 9; ++i) {
      double over = std::abs(x(i)) - att_limit;
      if (over > 0.0) g(i) += 2.0 * att_weight * over * (x(i) > 0.0 ? 1.0 : -1.0);
    }
    return g;
  }
};

// Shooting model over the predictor: p_{k+1} = p_k + Ts*(f(p_k, u_k) + c_k)
// with per-step constant corrections c_k. Parameters are the stacked inputs;
// their gradient is exposed as a horizon x 4 table.
class MpcShootModel {
 public:
  using D = Dual<16>;  // 12 state + 4 input channels

  MpcShootModel(const QuadParams& params, const MlpNet* net, std::vector<VectorXd>& u_seq,
                const std::vector<VectorXd>& corrections, double Ts)
      : params_(params), net_(net), u_seq_(u_seq), corrections_(corrections), Ts_(Ts) {
    u_grads_.assign(u_seq.size(), VectorXd::Zero(4));
  }

  VectorXd step(const VectorXd& x, int k) const {
    std::array<double, 12> xs;
    std::array<double, 4> us;
    for (int i = 0; i < 12; ++i) xs[i] = x(i);
    for (int i = 0; i < 4; ++i) us[i] = u_seq_[k](i);
    auto dx = quad_residual_deriv_core(params_, net_, xs, us);
    VectorXd xn(12);
    for (int i = 0; i < 12; ++i) xn(i) = x(i) + Ts_ * dx[i];
    if (!corrections_.empty()) xn += Ts_ * corrections_[k];
    return xn;
  }

  VectorXd step_vjp(const VectorXd& x, int k, const VectorXd& lambda_next) {
    std::array<D, 12> xs;
    std::array<D, 4> us;
    for (int i = 0; i < 12; ++i) xs[i] = D::seeded(x(i), i);
    for (int i = 0; i < 4; ++i) us[i] = D::seeded(u_seq_[k](i), 12 + i);
    auto dx = quad_residual_deriv_core(params_, net_, xs, us);
    VectorXd pullback = VectorXd::Zero(12);
    VectorXd ugrad = VectorXd::Zero(4);
    for (int c = 0; c < 12; ++c) {
      double acc = lambda_next(c);
      for (int r = 0; r < 12; ++r) acc += Ts_ * dx[r].d[c] * lambda_next(r);
      pullback(c) = acc;
    }
    for (int c = 0; c < 4; ++c) {
      double acc = 0.0;
      for (int r = 0; r < 12; ++r) acc += Ts_ * dx[r].d[12 + c] * lambda_next(r);
      ugrad(c) = acc;
    }
    u_grads_[k] += ugrad;
    return pullback;
  }

  void zero_grad() {
    for (auto& g : u_grads_) g.setZero();
  }
  const std::vector<VectorXd>& u_grads() const { return u_grads_; }

 private:
  QuadParams params_;
  const MlpNet* net_;
  std::vector<VectorXd>& u_seq_;
  const std::vector<VectorXd>& corrections_;
  double Ts_;
  std::vector<VectorXd> u_grads_;
};

struct MpcSession {
  std::vector<VectorXd> u_seq;   // warm start, horizon x 4
  VectorXd x_hat;                // persistent observer estimate, never re-anchored
  VectorXd pred1;                // previous cycle's first-layer prediction (innovation)
  VectorXd chi_hat;              // adaptive-head estimate (adaptive kinds)
  VectorXd head_bias;            // frozen output bias of the adapted net
  double last_cost = 0.0;
  double last_pred_err = 0.0;
  bool initialized = false;
};

inline MpcSession make_mpc_session(const MpcConfig& cfg, const MlpNet* net) {
  MpcSession s;
  s.u_seq.assign(cfg.horizon, VectorXd::Constant(4, 0.0));
  if (predictor_adapts(cfg.kind)) {
    require(net != nullptr, "adaptive predictor needs a residual net");
    PenultimateFeatures f = features_and_head(*net, VectorXd::Zero(net->input_dim()));
    s.chi_hat = f.head_weights;
    s.head_bias = f.head_bias;
  }
  return s;
}

struct MpcResult {
  Vector4d u0;
  std::vector<VectorXd> predicted;  // p_1..p_N under the returned inputs
  double cost = 0.0;
};

// Corrected receding-horizon predictions. The deviation between the measured
// state and the persistent observer estimate is frozen for the cycle and
// applied with decayed gains along the horizon; the estimate itself advances
// by the same corrected increments, so it is never re-anchored and the
// deviation converges to residual/gain instead of residual*Ts.
inline std::vector<VectorXd> mpc_feedback_predict(const MpcSession& session,
                                                  const MpcConfig& cfg, const VectorXd& x0,
                                                  const std::vector<VectorXd>& u_seq,
                                                  const QuadParams& model_params,
                                                  const MlpNet* net) {
  require(static_cast<int>(u_seq.size()) == cfg.horizon,
          "mpc_feedback_predict: input sequence length mismatch");
  std::vector<VectorXd> corrections;
  if (predictor_uses_correction(cfg.kind) && session.initialized) {
    require(session.x_hat.size() == x0.size(),
            "mpc_feedback_predict: estimate dimension mismatch");
    VectorXd d = x0 - session.x_hat;
    corrections.reserve(cfg.horizon);
    for (int i = 0; i < cfg.horizon; ++i)
      corrections.push_back(cfg.feedback_gain * std::exp(-cfg.beta * i) * d);
  }
  std::vector<VectorXd> u_copy = u_seq;
  MpcShootModel model(model_params, net, u_copy, corrections, cfg.Ts);
  std::vector<VectorXd> preds;
  preds.reserve(cfg.horizon);
  VectorXd p = x0;
  for (int k = 0; k < cfg.horizon; ++k) {
    p = model.step(p, k);
    if (!p.allFinite()) throw NumericError("mpc_feedback_predict: non-finite prediction");
    preds.push_back(p);
  }
  return preds;
}

namespace detail {

inline std::vector<VectorXd> project_box(const std::vector<VectorXd>& u, double lo, double hi) {
  std::vector<VectorXd> out = u;
  for (auto& uk : out)
    for (int i = 0; i < uk.size(); ++i) uk(i) = clamp(uk(i), lo, hi);
  return out;
}

}  // namespace detail

// Projected-gradient single shooting with backtracking. The returned cost
// never exceeds the warm-start cost: a step is only accepted if it decreases
// the objective, otherwise the warm start is kept.
inline MpcResult mpc_solve(MpcSession& session, const MpcConfig& cfg, const VectorXd& x0,
                           const std::vector<VectorXd>& ref_window,
                           const QuadParams& model_params, const MlpNet* net_in) {
  require(x0.size() == 12, "mpc_solve: state must be 12-dimensional");
  require(static_cast<int>(ref_window.size()) == cfg.horizon,
          "mpc_solve: reference window length mismatch");
  require(!predictor_uses_net(cfg.kind) || net_in != nullptr,
          "mpc_solve: predictor needs a residual net");

  // Adaptive kinds predict with the adapted head written into a net copy.
  MlpNet adapted;
  const MlpNet* net = predictor_uses_net(cfg.kind) ? net_in : nullptr;
  if (predictor_adapts(cfg.kind)) {
    adapted = *net_in;
    set_head(adapted, session.chi_hat);
    net = &adapted;
  }

  if (!session.initialized) {
    // Hover warm start on the first cycle; buffer = uncorrected rollout.
    VectorXd hover = quad_hover_input(model_params);
    for (auto& uk : session.u_seq) uk = hover.cwiseMax(cfg.u_lo).cwiseMin(cfg.u_hi);
  }

  // One-step prediction error of the previous cycle, logged before updating.
  session.last_pred_err =
      session.initialized ? (x0 - session.pred1).norm() : 0.0;

  // Corrections frozen for this cycle, from the persistent observer deviation.
  std::vector<VectorXd> corrections;
  if (predictor_uses_correction(cfg.kind) && session.initialized) {
    VectorXd d = x0 - session.x_hat;
    for (int i = 0; i < cfg.horizon; ++i)
      corrections.push_back(cfg.feedback_gain * std::exp(-cfg.beta * i) * d);
  }

  // Adaptive head update from the one-step innovation.
  if (predictor_adapts(cfg.kind) && session.initialized) {
    VectorXd x_tilde = x0 - session.pred1;
    std::array<double, 12> xs;
    for (int i = 0; i < 12; ++i) xs[i] = x0(i);
    auto s = residual_input(xs);
    VectorXd in(6);
    for (int i = 0; i < 6; ++i) in(i) = s[i];
    PenultimateFeatures f = features_and_head(*net_in, in);
    f.head_bias = session.head_bias;
    ObserverState tmp;
    tmp.chi_hat = session.chi_hat;
    tmp.gamma_diag = VectorXd::Constant(session.chi_hat.size(), cfg.adapt_gamma);
    // The head only drives v_dot; adapt on the velocity deviation channels.
    adaptive_update(tmp, f, x_tilde.segment(3, 3), cfg.Ts);
    session.chi_hat = tmp.chi_hat;
    set_head(adapted, session.chi_hat);
  }

  MpcStageLoss loss;
  loss.track.refs = ref_window;
  loss.track.weights = {cfg.q_diag};
  loss.att_weight = cfg.att_penalty_weight;
  loss.att_limit = cfg.att_limit;

  auto total_cost = [&](std::vector<VectorXd>& u) -> double {
    MpcShootModel m(model_params, net, u, corrections, cfg.Ts);
    double J = rollout_loss(m, x0, loss);
    for (const auto& uk : u) J += uk.dot(cfg.r_diag.cwiseProduct(uk));
    return J;
  };

  std::vector<VectorXd> u = detail::project_box(session.u_seq, cfg.u_lo, cfg.u_hi);
  double J = total_cost(u);
  for (int it = 0; it < cfg.iterations; ++it) {
    MpcShootModel m(model_params, net, u, corrections, cfg.Ts);
    adjoint_gradient(m, x0, loss);
    std::vector<VectorXd> g = m.u_grads();
    double gmax = 1e-12;
    for (int k = 0; k < cfg.horizon; ++k) {
      g[k] += 2.0 * cfg.r_diag.cwiseProduct(u[k]);
      gmax = std::max(gmax, g[k].cwiseAbs().maxCoeff());
    }
    // Backtracking on the projected step; initial scale reaches the box in
    // one move if the gradient asks for it.
    double alpha = (cfg.u_hi - cfg.u_lo) / gmax;
    bool accepted = false;
    for (int bt = 0; bt < 25; ++bt) {
      std::vector<VectorXd> cand(u.size());
      for (std::size_t k = 0; k < u.size(); ++k) cand[k] = u[k] - alpha * g[k];
      cand = detail::project_box(cand, cfg.u_lo, cfg.u_hi);
      double Jc = total_cost(cand);
      if (Jc < J) {
        u = std::move(cand);
        J = Jc;
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) break;  // stationary within line-search resolution
  }

  // Final predictions under the accepted inputs refresh the buffer.
  MpcShootModel m(model_params, net, u, corrections, cfg.Ts);
  std::vector<VectorXd> preds;
  VectorXd p = x0;
  for (int k = 0; k < cfg.horizon; ++k) {
    p = m.step(p, k);
    preds.push_back(p);
  }

  MpcResult res;
  res.u0 = u.front();
  res.predicted = preds;
  res.cost = J;

  // Estimate advance: x_hat moves by the corrected first-layer increment, so
  // it integrates f_model + L*d and is never re-anchored at the measurement.
  if (!session.initialized) session.x_hat = x0;
  session.x_hat += preds.front() - x0;
  session.pred1 = preds.front();
  session.last_cost = J;
  // Shift warm start; repeat the last input.
  for (int k = 0; k + 1 < cfg.horizon; ++k) session.u_seq[k] = u[k + 1];
  session.u_seq[cfg.horizon - 1] = u[cfg.horizon - 1];
  session.initialized = true;
  return res;
}

// --- flight simulation -------------------------------------------------------

struct FlightLog {
  std::vector<double> times;
  std::vector<VectorXd> states;  // true 12-dim states
  std::vector<VectorXd> refs;    // 12-dim reference (attitude/rate slots zero)
  std::vector<Vector4d> inputs;
  std::vector<double> costs;
  std::vector<double> pred_errs;
};

inline void save_flight_log_csv(const FlightLog& log, const std::string& path) {
  std::vector<std::string> cols = {"t"};
  for (int i = 0; i < 12; ++i) cols.push_back("x" + std::to_string(i));
  for (int i = 0; i < 12; ++i) cols.push_back("ref" + std::to_string(i));
  for (int i = 0; i < 4; ++i) cols.push_back("u" + std::to_string(i));
  cols.push_back("cost");
  cols.push_back("pred_err_norm");
  CsvWriter w(path, cols);
  std::vector<double> row(1 + 12 + 12 + 4 + 2);
  for (std::size_t k = 0; k < log.times.size(); ++k) {
    int c = 0;
    row[c++] = log.times[k];
    for (int i = 0; i < 12; ++i) row[c++] = log.states[k](i);
    for (int i = 0; i < 12; ++i) row[c++] = log.refs[k](i);
    for (int i = 0; i < 4; ++i) row[c++] = log.inputs[k](i);
    row[c++] = log.costs[k];
    row[c++] = log.pred_errs[k];
    w.row(row);
  }
}

struct FlightResult {
  FlightLog log;
  std::vector<Vector3d> integs;  // DFBC integrator states, data-collection flights only
  double pos_rmse = 0.0;
  Vector3d per_axis_rmse{0, 0, 0};
};

inline VectorXd flat_ref_state(const FlatRefSample& r) {
  VectorXd s = VectorXd::Zero(12);
  s.head<3>() = r.p;
  s.segment<3>(3) = r.v;
  return s;
}

namespace detail {

inline void finish_rmse(FlightResult& res) {
  Vector3d acc = Vector3d::Zero();
  for (std::size_t k = 0; k < res.log.times.size(); ++k) {
    Vector3d e = res.log.states[k].head<3>() - res.log.refs[k].head<3>();
    acc += e.cwiseProduct(e);
  }
  acc /= static_cast<double>(res.log.times.size());
  res.per_axis_rmse = acc.cwiseSqrt();
  res.pos_rmse = std::sqrt(acc.sum());
}

}  // namespace detail

// DFBC closed loop on the true system; used for data-collection flights and
// the controller regression test. Truth integrates with RK4; the controller
// sees the true state (noise is added by dataset builders, not here).
template <typename RefFn>
FlightResult simulate_flight_dfbc(const QuadParams& truth, const DfbcGains& gains,
                                  const VectorXd& x0, RefFn&& ref_fn, double T_end,
                                  double Ts) {
  int n_steps = static_cast<int>(std::round(T_end / Ts));
  FlightResult res;
  VectorXd x = x0;
  Vector3d integ = Vector3d::Zero();
  auto deriv = [&](const VectorXd& xs, const VectorXd& u, double) {
    return quad_deriv(truth, xs, u);
  };
  for (int k = 0; k < n_steps; ++k) {
    double t = k * Ts;
    FlatRefSample ref = ref_fn(t);
    res.integs.push_back(integ);
    Vector4d u = dfbc_control(truth, gains, x, integ, ref, Ts);
    res.log.times.push_back(t);
    res.log.states.push_back(x);
    res.log.refs.push_back(flat_ref_state(ref));
    res.log.inputs.push_back(u);
    res.log.costs.push_back(0.0);
    res.log.pred_errs.push_back(0.0);
    x = rk4_step(deriv, x, u, t, Ts);
  }
  detail::finish_rmse(res);
  return res;
}

// MPC closed loop on the true system. The controller receives measurements
// corrupted by seeded Gaussian noise; the same seed reproduces the same noise
// sequence regardless of the predictor, so controller comparisons share
// common random numbers.
template <typename RefFn>
FlightResult simulate_flight_mpc(const QuadParams& truth, const QuadParams& model_params,
                                 const MpcConfig& cfg, const MlpNet* net, const VectorXd& x0,
                                 RefFn&& ref_fn, double T_end, const VectorXd& noise_std,
                                 std::uint64_t seed) {
  int n_steps = static_cast<int>(std::round(T_end / cfg.Ts));
  FlightResult res;
  Rng noise_rng(seed);
  MpcSession session = make_mpc_session(cfg, net);
  VectorXd x = x0;
  auto deriv = [&](const VectorXd& xs, const VectorXd& u, double) {
    return quad_deriv(truth, xs, u);
  };
  for (int k = 0; k < n_steps; ++k) {
    double t = k * cfg.Ts;
    VectorXd x_meas = x;
    if (noise_std.size() == 12)
      for (int i = 0; i < 12; ++i) x_meas(i) += noise_std(i) * noise_rng.normal();

    std::vector<VectorXd> ref_window(cfg.horizon);
    for (int i = 0; i < cfg.horizon; ++i) {
      FlatRefSample r = ref_fn(t + (i + 1) * cfg.Ts);
      VectorXd rs = flat_ref_state(r);
      // Flat attitude reference: tilt consistent with the commanded
      // acceleration under the model's nominal mass, zero yaw.
      Vector3d F(-model_params.mass * r.a(0), -model_params.mass * r.a(1),
                 model_params.mass * (model_params.gravity - r.a(2)));
      double Tn = F.norm() + 1e-12;
      rs(6) = std::asin(clamp(-F(1) / Tn, -0.99, 0.99));
      rs(7) = std::atan2(F(0), F(2));
      ref_window[i] = rs;
    }

    MpcResult sol = mpc_solve(session, cfg, x_meas, ref_window, model_params, net);
    res.log.times.push_back(t);
    res.log.states.push_back(x);
    res.log.refs.push_back(flat_ref_state(ref_fn(t)));
    res.log.inputs.push_back(sol.u0);
    res.log.costs.push_back(sol.cost);
    res.log.pred_errs.push_back(session.last_pred_err);
    x = rk4_step(deriv, x, sol.u0, t, cfg.Ts);
  }
  detail::finish_rmse(res);
  return res;
}

}  // namespace fnn
