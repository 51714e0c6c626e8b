#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "fnn/adjoint.hpp"
#include "fnn/control.hpp"
#include "fnn/util/rng.hpp"

namespace {

using Eigen::VectorXd;
using namespace fnn;

std::vector<double> flat_params(const MlpNet& net) {
  std::vector<double> v;
  for (int k = 0; k < net.num_layers(); ++k) {
    for (int i = 0; i < net.weights[k].rows(); ++i)
      for (int j = 0; j < net.weights[k].cols(); ++j) v.push_back(net.weights[k](i, j));
    for (int i = 0; i < net.biases[k].size(); ++i) v.push_back(net.biases[k](i));
  }
  return v;
}

void set_flat_params(MlpNet& net, const std::vector<double>& v) {
  std::size_t c = 0;
  for (int k = 0; k < net.num_layers(); ++k) {
    for (int i = 0; i < net.weights[k].rows(); ++i)
      for (int j = 0; j < net.weights[k].cols(); ++j) net.weights[k](i, j) = v[c++];
    for (int i = 0; i < net.biases[k].size(); ++i) net.biases[k](i) = v[c++];
  }
}

std::vector<double> flat_grads(const MlpGrads& g) {
  std::vector<double> v;
  for (std::size_t k = 0; k < g.d_weights.size(); ++k) {
    for (int i = 0; i < g.d_weights[k].rows(); ++i)
      for (int j = 0; j < g.d_weights[k].cols(); ++j) v.push_back(g.d_weights[k](i, j));
    for (int i = 0; i < g.d_biases[k].size(); ++i) v.push_back(g.d_biases[k](i));
  }
  return v;
}

TEST(QuadraticLoss, ValueAndGradMatchDefinition) {
  Rng rng(3);
  QuadraticLoss loss;
  for (int k = 0; k < 3; ++k) {
    VectorXd r(2), w(2);
    for (int i = 0; i < 2; ++i) {
      r(i) = rng.normal();
      w(i) = std::abs(rng.normal()) + 0.1;
    }
    loss.refs.push_back(r);
    loss.weights.push_back(w);
  }
  VectorXd x(2);
  x << 0.7, -1.3;
  for (int k = 1; k <= 3; ++k) {
    VectorXd e = x - loss.refs[k - 1];
    const VectorXd& w = loss.weights[k - 1];
    EXPECT_DOUBLE_EQ(loss.value(k, x), w(0) * e(0) * e(0) + w(1) * e(1) * e(1));
    EXPECT_LT((loss.grad(k, x) - 2.0 * w.cwiseProduct(e)).norm(), 1e-15);
  }
  // A single weight entry is shared across every step.
  QuadraticLoss shared = unit_tracking_loss(loss.refs);
  EXPECT_EQ(shared.weight(1), shared.weight(3));
  EXPECT_THROW(unit_tracking_loss({}), std::invalid_argument);
}

// Scalar affine model F(x) = x + Ts*(w*x + b) admits an exact forward
// sensitivity recursion; the reverse-mode result must match it to roundoff.
TEST(AdjointGradient, MatchesClosedFormScalarRecursion) {
  MlpNet net = make_mlp({1, 1}, 0);
  double w = -0.8, b = 0.3, Ts = 0.05;
  net.weights[0](0, 0) = w;
  net.biases[0](0) = b;

  int H = 25;
  std::vector<VectorXd> refs;
  for (int k = 1; k <= H; ++k) refs.push_back(VectorXd::Constant(1, 0.5 * std::sin(double(k))));
  QuadraticLoss loss = unit_tracking_loss(refs);

  NodeEulerModel model(net, Ts);
  VectorXd x0 = VectorXd::Constant(1, 1.2);
  double J = adjoint_gradient(model, x0, loss);

  double x = x0(0), sw = 0.0, sb = 0.0;
  double J_ref = 0.0, dw = 0.0, db = 0.0;
  for (int k = 1; k <= H; ++k) {
    sw = Ts * x + (1.0 + Ts * w) * sw;
    sb = Ts + (1.0 + Ts * w) * sb;
    x = x + Ts * (w * x + b);
    double e = x - refs[k - 1](0);
    J_ref += e * e;
    dw += 2.0 * e * sw;
    db += 2.0 * e * sb;
  }
  EXPECT_NEAR(J, J_ref, 1e-12 * std::abs(J_ref));
  EXPECT_NEAR(model.grads().d_weights[0](0, 0), dw, 1e-12 * std::abs(dw));
  EXPECT_NEAR(model.grads().d_biases[0](0), db, 1e-12 * std::abs(db));
}

TEST(AdjointGradient, MatchesFiniteDifferenceWithInputs) {
  MlpNet net = make_mlp({3, 8, 2}, 17);
  double Ts = 0.1;
  int H = 12;
  Rng rng(4);
  std::vector<VectorXd> inputs, refs;
  for (int k = 0; k < H; ++k) {
    inputs.push_back(VectorXd::Constant(1, std::sin(0.3 * k)));
    VectorXd r(2);
    r << 0.3 * rng.normal(), 0.3 * rng.normal();
    refs.push_back(r);
  }
  QuadraticLoss loss = unit_tracking_loss(refs);
  VectorXd x0(2);
  x0 << 0.4, -0.2;

  NodeEulerModel model(net, Ts, inputs);
  adjoint_gradient(model, x0, loss);
  std::vector<double> g = flat_grads(model.grads());

  std::vector<double> theta = flat_params(net);
  ASSERT_EQ(g.size(), theta.size());
  double h = 1e-6, worst = 0.0, gmax = 0.0;
  for (double gi : g) gmax = std::max(gmax, std::abs(gi));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    std::vector<double> tp = theta;
    tp[i] = theta[i] + h;
    set_flat_params(net, tp);
    NodeEulerModel mp(net, Ts, inputs);
    double Jp = rollout_loss(mp, x0, loss);
    tp[i] = theta[i] - h;
    set_flat_params(net, tp);
    NodeEulerModel mm(net, Ts, inputs);
    double Jm = rollout_loss(mm, x0, loss);
    worst = std::max(worst, std::abs((Jp - Jm) / (2.0 * h) - g[i]));
  }
  set_flat_params(net, theta);
  EXPECT_LT(worst / std::max(gmax, 1e-8), 1e-6);
}

TEST(AdjointGradient, ReturnsSameLossAsPlainRollout) {
  MlpNet net = make_mlp({2, 6, 2}, 5);
  std::vector<VectorXd> refs(8, VectorXd::Zero(2));
  QuadraticLoss loss = unit_tracking_loss(refs);
  VectorXd x0(2);
  x0 << 0.9, -0.4;
  NodeEulerModel a(net, 0.05), b(net, 0.05);
  EXPECT_DOUBLE_EQ(adjoint_gradient(a, x0, loss), rollout_loss(b, x0, loss));
}

TEST(ForwardRollout, DivergenceAndValidation) {
  MlpNet net = make_mlp({1, 1}, 0);
  net.weights[0](0, 0) = 3.0;
  net.biases[0](0) = 0.0;
  NodeEulerModel model(net, 1.0);  // x -> 4x per step
  std::vector<VectorXd> refs(12, VectorXd::Zero(1));
  QuadraticLoss loss = unit_tracking_loss(refs);
  EXPECT_THROW(rollout_loss(model, VectorXd::Constant(1, 10.0), loss), NumericError);
  EXPECT_THROW(NodeEulerModel(net, 0.0), std::invalid_argument);

  // Input table shorter than the horizon is refused at the step that needs it.
  MlpNet net2 = make_mlp({2, 4, 1}, 1);
  NodeEulerModel short_in(net2, 0.1, {VectorXd::Zero(1)});
  std::vector<VectorXd> refs2(3, VectorXd::Zero(1));
  QuadraticLoss loss2 = unit_tracking_loss(refs2);
  EXPECT_THROW(rollout_loss(short_in, VectorXd::Zero(1), loss2), std::invalid_argument);
}

// The closed-loop quadrotor model differentiates through controller,
// dynamics, and residual net at once; a directional probe against central
// differences on the full parameter vector validates the whole chain.
TEST(QuadClosedLoopModel, GradientMatchesDirectionalFiniteDifference) {
  QuadParams qp = make_quad_params();
  DfbcGains gains;
  MlpNet net = make_mlp({6, 16, 3}, 42);
  double Ts = 0.02;
  int H = 6;

  std::vector<FlatRefSample> refs;
  for (int k = 0; k < H; ++k) refs.push_back(circle_ref(k * Ts, 1.5, 4.0, 1.0));

  VectorXd X0 = VectorXd::Zero(QuadClosedLoopModel::kStateDim);
  X0 << 0.1, -0.05, 1.0, 0.2, -0.1, 0.05, 0.02, -0.01, 0.0, 0.1, -0.05, 0.02,
      0.01, -0.02, 0.005;

  Rng rng(6);
  QuadraticLoss loss;
  VectorXd w = VectorXd::Zero(QuadClosedLoopModel::kStateDim);
  w.head(12).setOnes();
  loss.weights = {w};
  for (int k = 1; k <= H; ++k) {
    VectorXd r = VectorXd::Zero(QuadClosedLoopModel::kStateDim);
    for (int i = 0; i < 12; ++i) r(i) = X0(i) + 0.05 * rng.normal();
    loss.refs.push_back(r);
  }

  QuadClosedLoopModel model(qp, gains, net, refs, Ts);
  adjoint_gradient(model, X0, loss);
  std::vector<double> g = flat_grads(model.grads());
  std::vector<double> theta = flat_params(net);

  for (int probe = 0; probe < 3; ++probe) {
    std::vector<double> dir(theta.size());
    double nrm = 0.0;
    for (auto& d : dir) {
      d = rng.normal();
      nrm += d * d;
    }
    nrm = std::sqrt(nrm);
    double dd = 0.0;
    for (std::size_t i = 0; i < dir.size(); ++i) {
      dir[i] /= nrm;
      dd += dir[i] * g[i];
    }
    double h = 1e-6;
    std::vector<double> tp = theta;
    for (std::size_t i = 0; i < tp.size(); ++i) tp[i] = theta[i] + h * dir[i];
    set_flat_params(net, tp);
    QuadClosedLoopModel mp(qp, gains, net, refs, Ts);
    double Jp = rollout_loss(mp, X0, loss);
    for (std::size_t i = 0; i < tp.size(); ++i) tp[i] = theta[i] - h * dir[i];
    set_flat_params(net, tp);
    QuadClosedLoopModel mm(qp, gains, net, refs, Ts);
    double Jm = rollout_loss(mm, X0, loss);
    set_flat_params(net, theta);
    double fd = (Jp - Jm) / (2.0 * h);
    EXPECT_NEAR(dd, fd, 1e-4 * std::max({std::abs(dd), std::abs(fd), 1e-8}))
        << "probe " << probe;
  }
}

// With a zero-output residual net the closed-loop step must integrate the
// nominal controller + plant exactly like the standalone simulator's pieces.
TEST(QuadClosedLoopModel, StepMatchesManualCascade) {
  QuadParams qp = make_quad_params();
  DfbcGains gains;
  MlpNet net = make_mlp({6, 8, 3}, 3);
  for (auto& wm : net.weights) wm.setZero();
  for (auto& bv : net.biases) bv.setZero();
  double Ts = 0.02;
  FlatRefSample ref = circle_ref(0.3, 2.0, 5.0, 1.2);
  QuadClosedLoopModel model(qp, gains, net, {ref}, Ts);

  VectorXd X0 = VectorXd::Zero(QuadClosedLoopModel::kStateDim);
  X0(2) = 1.0;
  X0(3) = 0.4;

  VectorXd x12 = X0.head(12);
  Eigen::Vector3d integ = X0.tail(3);
  Eigen::Vector4d u = dfbc_control(qp, gains, x12, integ, ref, Ts);
  VectorXd dx = quad_deriv(qp, x12, u);
  VectorXd Xn = model.step(X0, 0);
  EXPECT_LT((Xn.head(12) - (x12 + Ts * dx)).cwiseAbs().maxCoeff(), 1e-14);
  // dfbc_control already advanced integ by Ts * integ_dot.
  EXPECT_LT((Xn.tail(3) - integ).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_THROW(model.step(X0, 1), std::invalid_argument);
}

}  // namespace
