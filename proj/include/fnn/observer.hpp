#pragma once

// The feedback correction around a learned derivative model: a linear
// observer on the model's own prediction error, an anchored neural variant,
// an adaptive-head variant, and cascaded multi-step prediction with
// exponentially decayed gains.

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <string>
#include <vector>

#include "fnn/mlp.hpp"
#include "fnn/util/csv.hpp"
#include "fnn/util/errors.hpp"

namespace fnn {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class FeedbackMode { Off, Linear, Neural, Adaptive };

inline double spectral_radius(const MatrixXd& m) {
  return Eigen::EigenSolver<MatrixXd>(m, false).eigenvalues().cwiseAbs().maxCoeff();
}

struct FeedbackGain {
  FeedbackMode mode = FeedbackMode::Off;
  MatrixXd L;         // n x n, symmetric PSD; diagonal in every experiment
  double beta = 0.0;  // horizon gain decay rate

  double decay(int i) const { return std::exp(-beta * i); }

  double lambda_min() const {
    return Eigen::SelfAdjointEigenSolver<MatrixXd>(L, Eigen::EigenvaluesOnly)
        .eigenvalues()
        .minCoeff();
  }
  double lambda_max() const {
    return Eigen::SelfAdjointEigenSolver<MatrixXd>(L, Eigen::EigenvaluesOnly)
        .eigenvalues()
        .maxCoeff();
  }
};

// Construction-time stability check: the discrete error map I - Ts*L must be
// a strict contraction in spectral radius, or every bound downstream is void.
// Mode Off carries no gain and skips the check.
inline FeedbackGain make_feedback_gain(FeedbackMode mode, const MatrixXd& L, double beta,
                                       double Ts) {
  require(beta >= 0.0, "feedback gain: beta must be >= 0");
  FeedbackGain g;
  g.mode = mode;
  g.beta = beta;
  if (mode == FeedbackMode::Off) {
    g.L = MatrixXd::Zero(L.rows(), L.cols());
    return g;
  }
  require(L.rows() == L.cols(), "feedback gain: L must be square");
  require(Ts > 0.0, "feedback gain: Ts must be positive");
  if (!L.isApprox(L.transpose(), 1e-12))
    throw ConfigError("feedback gain: L must be symmetric");
  double lmin = Eigen::SelfAdjointEigenSolver<MatrixXd>(L, Eigen::EigenvaluesOnly)
                    .eigenvalues()
                    .minCoeff();
  if (lmin < 0.0) throw ConfigError("feedback gain: L must be positive semi-definite");
  MatrixXd step = MatrixXd::Identity(L.rows(), L.cols()) - Ts * L;
  double rho = spectral_radius(step);
  if (!(rho < 1.0))
    throw ConfigError("feedback gain: spectral radius of I - Ts*L is " +
                      std::to_string(rho) + ", discrete error dynamics not stable");
  g.L = L;
  return g;
}

inline FeedbackGain scalar_gain(FeedbackMode mode, double l, int n, double beta, double Ts) {
  if (mode != FeedbackMode::Off && l == 0.0) mode = FeedbackMode::Off;
  return make_feedback_gain(mode, l * MatrixXd::Identity(n, n), beta, Ts);
}

struct ObserverState {
  VectorXd x_hat;
  double t = 0.0;
  // Adaptive mode only: flat output-layer weight estimate and the diagonal
  // of its adaptation gain, both of length n*l.
  VectorXd chi_hat;
  VectorXd gamma_diag;
};

inline ObserverState make_observer(const VectorXd& x0, double t0 = 0.0) {
  ObserverState obs;
  obs.x_hat = x0;
  obs.t = t0;
  return obs;
}

// Adaptive observer: the weight estimate starts at the trained head, so with
// zero adaptation gain the scheme degenerates to the linear observer.
inline ObserverState make_adaptive_observer(const MlpNet& net, const VectorXd& x0,
                                            double gamma, double t0 = 0.0) {
  require(gamma >= 0.0, "adaptive observer: gamma must be >= 0");
  ObserverState obs = make_observer(x0, t0);
  PenultimateFeatures f = features_and_head(net, VectorXd::Zero(net.input_dim()));
  obs.chi_hat = f.head_weights;
  obs.gamma_diag = VectorXd::Constant(f.head_weights.size(), gamma);
  return obs;
}

// Anchored feedback network: h(d) - h(0). The anchor makes the correction
// vanish exactly at zero deviation, so nominal behavior is untouched by
// whatever the feedback unit learned.
inline VectorXd anchored_feedback(const MlpNet& h_net, const VectorXd& d) {
  return mlp_forward(h_net, d) - mlp_forward(h_net, VectorXd::Zero(d.size()));
}

struct CorrectionContext {
  const MlpNet* h_net = nullptr;                  // Neural mode
  const PenultimateFeatures* features = nullptr;  // Adaptive mode, evaluated at the model input
};

// Corrected derivative given the model's own evaluation and the deviation
// between measurement and estimate.
inline VectorXd corrected_deriv(const VectorXd& f_neural_eval, const FeedbackGain& gain,
                                const VectorXd& x, const ObserverState& obs,
                                const CorrectionContext& ctx = {}) {
  require(x.size() == obs.x_hat.size(), "corrected_deriv: dimension mismatch");
  switch (gain.mode) {
    case FeedbackMode::Off:
      return f_neural_eval;
    case FeedbackMode::Linear:
      return f_neural_eval + gain.L * (x - obs.x_hat);
    case FeedbackMode::Neural: {
      require(ctx.h_net != nullptr, "corrected_deriv: neural mode needs a feedback net");
      return f_neural_eval + anchored_feedback(*ctx.h_net, x - obs.x_hat);
    }
    case FeedbackMode::Adaptive: {
      require(ctx.features != nullptr, "corrected_deriv: adaptive mode needs features");
      require(obs.chi_hat.size() > 0, "corrected_deriv: observer has no weight estimate");
      return recombine_head(*ctx.features, obs.chi_hat) + gain.L * (x - obs.x_hat);
    }
  }
  throw std::invalid_argument("corrected_deriv: unknown mode");
}

inline void observer_advance(ObserverState& obs, const VectorXd& f_hat, double Ts) {
  require(Ts > 0.0, "observer_advance: Ts must be positive");
  if (!f_hat.allFinite())
    throw NumericError("observer_advance: non-finite corrected derivative");
  obs.x_hat += Ts * f_hat;
  obs.t += Ts;
}

// Euler-discretized adaptation of the flat head estimate:
// chi_hat += Ts * Gamma * Xi^T * x_tilde, where Xi is the block regressor
// with the feature vector in row-block i. Segment i of Xi^T x_tilde is
// features * x_tilde(i), so the block matrix is never formed.
inline void adaptive_update(ObserverState& obs, const PenultimateFeatures& features,
                            const VectorXd& x_tilde, double Ts) {
  int n = static_cast<int>(x_tilde.size());
  int l = static_cast<int>(features.features.size());
  require(obs.chi_hat.size() == static_cast<Eigen::Index>(n) * l,
          "adaptive_update: regressor/weight shape mismatch");
  for (int i = 0; i < n; ++i)
    obs.chi_hat.segment(i * l, l) +=
        Ts * obs.gamma_diag.segment(i * l, l).cwiseProduct(features.features * x_tilde(i));
}

// Cascaded multi-step prediction. The deviation d = x_meas - x_hat is frozen
// at the measurement instant; step i applies the decayed correction
// decay(i) * (gain term on d). Later-stage gains never influence earlier
// predictions. The model input is the state, concatenated with u_seq[i] when
// inputs are present. Adaptive mode is served by the receding-horizon
// predictor in control code, not here.
inline std::vector<VectorXd> multistep_predict(const MlpNet& f_neural,
                                               const FeedbackGain& gain,
                                               const VectorXd& x_meas,
                                               const ObserverState& obs,
                                               const std::vector<VectorXd>& u_seq, double Ts,
                                               int N, const MlpNet* h_net = nullptr) {
  require(N >= 1, "multistep_predict: N must be >= 1");
  require(gain.mode != FeedbackMode::Adaptive,
          "multistep_predict: adaptive mode not supported here");
  if (!u_seq.empty())
    require(static_cast<int>(u_seq.size()) >= N, "multistep_predict: input sequence too short");
  VectorXd d = x_meas - obs.x_hat;
  VectorXd h0;
  if (gain.mode == FeedbackMode::Neural) {
    require(h_net != nullptr, "multistep_predict: neural mode needs a feedback net");
    h0 = anchored_feedback(*h_net, d);
  }
  std::vector<VectorXd> preds;
  preds.reserve(N);
  VectorXd p = x_meas;
  for (int i = 0; i < N; ++i) {
    VectorXd in;
    if (u_seq.empty()) {
      in = p;
    } else {
      in.resize(p.size() + u_seq[i].size());
      in << p, u_seq[i];
    }
    VectorXd f = mlp_forward(f_neural, in);
    switch (gain.mode) {
      case FeedbackMode::Off:
        break;
      case FeedbackMode::Linear:
        f += gain.decay(i) * (gain.L * d);
        break;
      case FeedbackMode::Neural:
        f += gain.decay(i) * h0;
        break;
      case FeedbackMode::Adaptive:
        break;
    }
    p = p + Ts * f;
    if (!p.allFinite()) throw NumericError("multistep_predict: non-finite prediction");
    preds.push_back(p);
  }
  return preds;
}

// --- observer traces ------------------------------------------------------

struct ObserverTrace {
  std::vector<double> times;
  std::vector<VectorXd> x;
  std::vector<VectorXd> x_hat;
  std::vector<double> x_tilde_norm;
  std::vector<double> bound;  // theoretical band at that time
};

inline void save_observer_trace_csv(const ObserverTrace& trace, const std::string& path) {
  require(!trace.times.empty(), "save_observer_trace_csv: empty trace");
  int n = static_cast<int>(trace.x.front().size());
  std::vector<std::string> cols = {"t"};
  for (int i = 0; i < n; ++i) cols.push_back("x" + std::to_string(i));
  for (int i = 0; i < n; ++i) cols.push_back("x_hat" + std::to_string(i));
  cols.push_back("x_tilde_norm");
  cols.push_back("bound");
  CsvWriter w(path, cols);
  std::vector<double> row(1 + 2 * n + 2);
  for (std::size_t k = 0; k < trace.times.size(); ++k) {
    row[0] = trace.times[k];
    for (int i = 0; i < n; ++i) row[1 + i] = trace.x[k](i);
    for (int i = 0; i < n; ++i) row[1 + n + i] = trace.x_hat[k](i);
    row[1 + 2 * n] = trace.x_tilde_norm[k];
    row[1 + 2 * n + 1] = trace.bound[k];
    w.row(row);
  }
}

}  // namespace fnn
