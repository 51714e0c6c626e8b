#pragma once

// Exact gradients of rollout losses by reverse (adjoint) recursion over a
// discrete one-step model. The same core drives neural-ODE training and the
// single-shooting MPC solver, so there is exactly one gradient implementation
// to validate against finite differences.
//
// Model contract (duck-typed):
//   VectorXd step(const VectorXd& x, int k);
//     one-step map F_k(x).
//   VectorXd step_vjp(const VectorXd& x, int k, const VectorXd& lambda_next);
//     returns (dF_k/dx)^T lambda_next and accumulates (dF_k/dtheta)^T
//     lambda_next into the model's gradient storage.
//   void zero_grad();  (only needed by adjoint_gradient)
//
// Loss contract:
//   double value(int k, const VectorXd& x) for k = 1..H;
//   VectorXd grad(int k, const VectorXd& x);
//   int horizon().

#include <Eigen/Dense>
#include <vector>

#include "fnn/mlp.hpp"
#include "fnn/util/errors.hpp"

namespace fnn {

// Per-step weighted quadratic tracking loss sum_k (x_k - r_k)^T diag(w_k) (x_k - r_k),
// k = 1..H. refs[k-1] is the target for the state after k steps.
struct QuadraticLoss {
  std::vector<VectorXd> refs;
  std::vector<VectorXd> weights;  // one diagonal per step, or a single shared one

  int horizon() const { return static_cast<int>(refs.size()); }

  const VectorXd& weight(int k) const {
    return weights.size() == 1 ? weights[0] : weights[static_cast<std::size_t>(k) - 1];
  }

  double value(int k, const VectorXd& x) const {
    VectorXd e = x - refs[static_cast<std::size_t>(k) - 1];
    return e.dot(weight(k).cwiseProduct(e));
  }

  VectorXd grad(int k, const VectorXd& x) const {
    VectorXd e = x - refs[static_cast<std::size_t>(k) - 1];
    return 2.0 * weight(k).cwiseProduct(e);
  }
};

inline QuadraticLoss unit_tracking_loss(const std::vector<VectorXd>& refs) {
  require(!refs.empty(), "tracking loss needs at least one reference");
  QuadraticLoss loss;
  loss.refs = refs;
  loss.weights = {VectorXd::Ones(refs.front().size())};
  return loss;
}

template <typename Model, typename Loss>
std::vector<VectorXd> forward_rollout(Model& model, const VectorXd& x0, const Loss& loss,
                                      double diverge_bound = 1e6) {
  int H = loss.horizon();
  require(H >= 1, "adjoint: horizon must be >= 1");
  std::vector<VectorXd> xs;
  xs.reserve(H + 1);
  xs.push_back(x0);
  for (int k = 0; k < H; ++k) {
    xs.push_back(model.step(xs.back(), k));
    if (!xs.back().allFinite() || xs.back().norm() > diverge_bound)
      throw NumericError("adjoint forward rollout diverged at step " + std::to_string(k + 1));
  }
  return xs;
}

template <typename Model, typename Loss>
double rollout_loss(Model& model, const VectorXd& x0, const Loss& loss) {
  std::vector<VectorXd> xs = forward_rollout(model, x0, loss);
  double J = 0.0;
  for (int k = 1; k <= loss.horizon(); ++k) J += loss.value(k, xs[k]);
  return J;
}

// Forward rollout, then reverse costate recursion
//   lambda_H = dl_H/dx,  lambda_k = dl_k/dx + (dF_k/dx)^T lambda_{k+1},
// accumulating (dF_k/dtheta)^T lambda_{k+1} into the model at every step.
// Returns the loss value; gradients are read from the model afterwards.
template <typename Model, typename Loss>
double adjoint_gradient(Model& model, const VectorXd& x0, const Loss& loss) {
  std::vector<VectorXd> xs = forward_rollout(model, x0, loss);
  int H = loss.horizon();
  double J = 0.0;
  for (int k = 1; k <= H; ++k) J += loss.value(k, xs[k]);

  model.zero_grad();
  VectorXd lambda = loss.grad(H, xs[H]);
  for (int k = H - 1; k >= 0; --k) {
    VectorXd pullback = model.step_vjp(xs[k], k, lambda);
    if (k >= 1) lambda = loss.grad(k, xs[k]) + pullback;
  }
  return J;
}

// Euler one-step model over a network derivative field:
//   F_k(x) = x + Ts * net([x; u_k]),
// with u_k from an optional per-step input table. One backward pass per step
// yields both the parameter contribution and the state pullback.
class NodeEulerModel {
 public:
  NodeEulerModel(MlpNet& net, double Ts, std::vector<VectorXd> inputs = {})
      : net_(net), Ts_(Ts), inputs_(std::move(inputs)), grads_(MlpGrads::zeros_like(net)) {
    require(Ts > 0.0, "NodeEulerModel: Ts must be positive");
  }

  VectorXd step(const VectorXd& x, int k) const {
    return x + Ts_ * mlp_forward(net_, stacked(x, k));
  }

  VectorXd step_vjp(const VectorXd& x, int k, const VectorXd& lambda_next) {
    BackwardResult bw = mlp_backward(net_, stacked(x, k), lambda_next);
    grads_.add_scaled(bw.grads, Ts_);
    return lambda_next + Ts_ * bw.input_grad.head(x.size());
  }

  void zero_grad() { grads_ = MlpGrads::zeros_like(net_); }
  const MlpGrads& grads() const { return grads_; }
  MlpGrads& grads() { return grads_; }

 private:
  VectorXd stacked(const VectorXd& x, int k) const {
    if (inputs_.empty()) return x;
    require(k < static_cast<int>(inputs_.size()), "NodeEulerModel: input table too short");
    VectorXd in(x.size() + inputs_[k].size());
    in << x, inputs_[k];
    return in;
  }

  MlpNet& net_;
  double Ts_;
  std::vector<VectorXd> inputs_;
  MlpGrads grads_;
};

}  // namespace fnn
