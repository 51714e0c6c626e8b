#pragma once

// Training pipelines: multi-step adjoint training of derivative networks
// (open-loop and through the quadrotor's closed loop), domain-randomized
// training of the feedback unit with the dynamics network frozen, and the
// single-step supervised baseline.

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "fnn/adjoint.hpp"
#include "fnn/control.hpp"
#include "fnn/integrate.hpp"
#include "fnn/mlp.hpp"
#include "fnn/observer.hpp"
#include "fnn/util/csv.hpp"
#include "fnn/util/errors.hpp"
#include "fnn/util/rng.hpp"

namespace fnn {

struct TrainConfig {
  int iterations = 400;    // total optimizer updates
  int batch_size = 20;     // segments (or samples) per update
  int segment_len = 10;    // rollout horizon per segment
  double learning_rate = 1e-3;
  OptimState::Kind optimizer = OptimState::Kind::RMSprop;
  std::uint64_t seed = 0;
};

struct LossHistory {
  std::vector<double> train;
  std::vector<double> val;
  std::vector<double> test;
};

inline void save_loss_csv(const LossHistory& h, const std::string& path) {
  std::vector<std::string> cols = {"epoch", "loss"};
  if (!h.val.empty()) cols.push_back("val_loss");
  if (!h.test.empty()) cols.push_back("test_loss");
  CsvWriter w(path, cols);
  for (std::size_t e = 0; e < h.train.size(); ++e) {
    std::vector<double> row = {static_cast<double>(e), h.train[e]};
    if (!h.val.empty()) row.push_back(h.val[e]);
    if (!h.test.empty()) row.push_back(h.test[e]);
    w.row(row);
  }
}

namespace detail {

struct Segment {
  int traj = 0;
  int start = 0;  // index of the segment's initial state
};

// Contiguous, non-overlapping segments of `len` steps.
inline std::vector<Segment> slice_segments(const std::vector<Trajectory>& trajs, int len) {
  std::vector<Segment> segs;
  for (std::size_t t = 0; t < trajs.size(); ++t) {
    int n = static_cast<int>(trajs[t].size());
    for (int s = 0; s + len < n; s += len) segs.push_back({static_cast<int>(t), s});
  }
  require(!segs.empty(), "training trajectories too short for one segment");
  return segs;
}

}  // namespace detail

// Multi-step adjoint training of x_dot = net([x; u]) on recorded
// trajectories. Each update draws a shuffled mini-batch of segments, rolls
// the model out from each segment head, and averages the exact rollout-loss
// gradient per (segment, step). Deterministic given cfg.seed.
inline LossHistory train_node(MlpNet& net, const std::vector<Trajectory>& trajs,
                              const TrainConfig& cfg) {
  require(!trajs.empty(), "train_node: no trajectories");
  double Ts = trajs.front().times[1] - trajs.front().times[0];
  std::vector<detail::Segment> segs = detail::slice_segments(trajs, cfg.segment_len);
  Rng rng(cfg.seed);
  OptimState opt = OptimState::make(cfg.optimizer, cfg.learning_rate, net);
  LossHistory hist;

  std::vector<int> order(segs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  int done = 0;
  std::size_t cursor = order.size();  // forces a shuffle on first use
  double epoch_loss = 0.0;
  int epoch_terms = 0;
  while (done < cfg.iterations) {
    MlpGrads batch = MlpGrads::zeros_like(net);
    double batch_loss = 0.0;
    int batch_terms = 0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor >= order.size()) {
        // Epoch boundary: record the running mean and reshuffle.
        if (epoch_terms > 0) {
          hist.train.push_back(epoch_loss / epoch_terms);
          epoch_loss = 0.0;
          epoch_terms = 0;
        }
        rng.shuffle(order);
        cursor = 0;
      }
      const detail::Segment& sg = segs[order[cursor++]];
      const Trajectory& tr = trajs[sg.traj];
      std::vector<VectorXd> refs(tr.states.begin() + sg.start + 1,
                                 tr.states.begin() + sg.start + 1 + cfg.segment_len);
      std::vector<VectorXd> inputs;
      if (tr.has_inputs())
        inputs.assign(tr.inputs.begin() + sg.start,
                      tr.inputs.begin() + sg.start + cfg.segment_len);
      NodeEulerModel model(net, Ts, std::move(inputs));
      QuadraticLoss loss = unit_tracking_loss(refs);
      double J;
      try {
        J = adjoint_gradient(model, tr.states[sg.start], loss);
      } catch (const NumericError& e) {
        throw NumericError("train_node: segment (traj " + std::to_string(sg.traj) +
                           ", start " + std::to_string(sg.start) + "): " + e.what());
      }
      batch.add_scaled(model.grads(), 1.0);
      batch_loss += J;
      batch_terms += cfg.segment_len;
    }
    batch.scale(1.0 / batch_terms);
    opt_step(net, opt, batch);
    epoch_loss += batch_loss / batch_terms;
    epoch_terms += 1;
    ++done;
  }
  if (epoch_terms > 0) hist.train.push_back(epoch_loss / epoch_terms);
  return hist;
}

// --- feedback-unit training ---------------------------------------------------

// One randomized system's measured trajectory (uniform Ts, no inputs).
struct FeedbackCase {
  Trajectory measured;
};

// Tuple of the regenerated observer trace: model evaluation is cached so the
// inner loop touches only the feedback net.
struct FeedbackSample {
  VectorXd x_prev;   // measurement at j-1
  VectorXd d_prev;   // deviation x_prev - x_hat_{j-1}
  VectorXd f_prev;   // frozen net's derivative at x_prev
  VectorXd x_next;   // measurement at j (the target)
};

namespace detail {

// Observer recursion with the current feedback unit: the frozen net is
// evaluated at the measured state, the anchored correction at the running
// deviation. Produces one training tuple per step.
inline void regenerate_case(const MlpNet& f_net, const MlpNet& h_net, const FeedbackCase& c,
                            double Ts, std::vector<FeedbackSample>& out) {
  const auto& xs = c.measured.states;
  VectorXd x_hat = xs.front();
  for (std::size_t j = 1; j < xs.size(); ++j) {
    FeedbackSample s;
    s.x_prev = xs[j - 1];
    s.d_prev = xs[j - 1] - x_hat;
    s.f_prev = mlp_forward(f_net, xs[j - 1]);
    s.x_next = xs[j];
    x_hat += Ts * (s.f_prev + anchored_feedback(h_net, s.d_prev));
    if (!x_hat.allFinite())
      throw NumericError("feedback training: observer diverged during trace regeneration");
    out.push_back(std::move(s));
  }
}

}  // namespace detail

// Domain-randomized feedback training. Every epoch regenerates the observer
// traces with the current feedback unit, then minimizes the mean unsquared
// prediction-error norm || x_next - (x_prev + Ts*(f + h(d)-h(0))) || over
// shuffled mini-batches, updating only the feedback net. The dynamics net is
// asserted bit-identical before and after.
inline LossHistory train_feedback(const MlpNet& f_net, MlpNet& h_net,
                                  const std::vector<FeedbackCase>& cases,
                                  const TrainConfig& cfg) {
  require(!cases.empty(), "train_feedback: no cases");
  double Ts = cases.front().measured.times[1] - cases.front().measured.times[0];
  MlpNet frozen_copy = f_net;

  Rng rng(cfg.seed);
  OptimState opt = OptimState::make(cfg.optimizer, cfg.learning_rate, h_net);
  LossHistory hist;

  std::vector<FeedbackSample> data;
  std::vector<int> order;
  std::size_t cursor = 0;
  int done = 0;
  double epoch_loss = 0.0;
  int epoch_batches = 0;
  VectorXd zero_dev;

  auto regenerate = [&]() {
    if (epoch_batches > 0) {
      hist.train.push_back(epoch_loss / epoch_batches);
      epoch_loss = 0.0;
      epoch_batches = 0;
    }
    data.clear();
    for (const auto& c : cases) detail::regenerate_case(f_net, h_net, c, Ts, data);
    order.resize(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);
    cursor = 0;
    zero_dev = VectorXd::Zero(data.front().d_prev.size());
  };
  regenerate();

  while (done < cfg.iterations) {
    if (cursor + cfg.batch_size > order.size()) regenerate();
    MlpGrads batch = MlpGrads::zeros_like(h_net);
    double batch_loss = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const FeedbackSample& s = data[order[cursor++]];
      VectorXd pred =
          s.x_prev + Ts * (s.f_prev + mlp_forward(h_net, s.d_prev) -
                           mlp_forward(h_net, zero_dev));
      VectorXd err = pred - s.x_next;
      double norm = err.norm();
      batch_loss += norm;
      if (norm < 1e-12) continue;  // loss kink at exact hit; zero subgradient
      VectorXd g = (Ts / norm) * err;
      batch.add_scaled(mlp_backward(h_net, s.d_prev, g).grads, 1.0);
      batch.add_scaled(mlp_backward(h_net, zero_dev, g).grads, -1.0);
    }
    batch.scale(1.0 / cfg.batch_size);
    opt_step(h_net, opt, batch);
    epoch_loss += batch_loss / cfg.batch_size;
    epoch_batches += 1;
    ++done;
  }
  if (epoch_batches > 0) hist.train.push_back(epoch_loss / epoch_batches);

  require(mlp_params_equal(f_net, frozen_copy),
          "train_feedback: dynamics network parameters changed");
  return hist;
}

// Mean prediction-error norm of the current feedback net over every sample in
// the dataset, without updating anything. Evaluating before training gives
// the reference level for improvement ratios.
inline double feedback_dataset_loss(const MlpNet& f_net, const MlpNet& h_net,
                                    const std::vector<FeedbackCase>& cases) {
  require(!cases.empty(), "feedback_dataset_loss: no cases");
  double Ts = cases.front().measured.times[1] - cases.front().measured.times[0];
  std::vector<FeedbackSample> data;
  for (const auto& c : cases) detail::regenerate_case(f_net, h_net, c, Ts, data);
  VectorXd zero_dev = VectorXd::Zero(data.front().d_prev.size());
  double acc = 0.0;
  for (const auto& s : data) {
    VectorXd pred = s.x_prev + Ts * (s.f_prev + mlp_forward(h_net, s.d_prev) -
                                     mlp_forward(h_net, zero_dev));
    acc += (pred - s.x_next).norm();
  }
  return acc / static_cast<double>(data.size());
}

// --- single-step supervised baseline ------------------------------------------

struct SupervisedSet {
  std::vector<VectorXd> inputs;
  std::vector<VectorXd> targets;
};

namespace detail {

inline double mse_over(const MlpNet& net, const SupervisedSet& set) {
  double acc = 0.0;
  for (std::size_t i = 0; i < set.inputs.size(); ++i)
    acc += (mlp_forward(net, set.inputs[i]) - set.targets[i]).squaredNorm();
  return acc / static_cast<double>(set.inputs.size());
}

}  // namespace detail

// Plain single-step regression with mean-squared-error loss; records
// train/val/test curves per epoch. This is the baseline whose one-step fit
// is comparable to adjoint training but whose multi-step rollouts drift.
inline LossHistory train_mlp_baseline(MlpNet& net, const SupervisedSet& train_set,
                                      const SupervisedSet& val_set,
                                      const SupervisedSet& test_set, const TrainConfig& cfg) {
  require(!train_set.inputs.empty(), "train_mlp_baseline: empty training set");
  require(!val_set.inputs.empty(), "train_mlp_baseline: empty validation set");
  require(train_set.inputs.size() == train_set.targets.size(),
          "train_mlp_baseline: input/target size mismatch");

  Rng rng(cfg.seed);
  OptimState opt = OptimState::make(cfg.optimizer, cfg.learning_rate, net);
  LossHistory hist;
  std::vector<int> order(train_set.inputs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  std::size_t cursor = order.size();
  double epoch_loss = 0.0;
  int epoch_batches = 0;
  auto close_epoch = [&]() {
    if (epoch_batches == 0) return;
    hist.train.push_back(epoch_loss / epoch_batches);
    hist.val.push_back(detail::mse_over(net, val_set));
    hist.test.push_back(test_set.inputs.empty() ? 0.0 : detail::mse_over(net, test_set));
    epoch_loss = 0.0;
    epoch_batches = 0;
  };

  for (int done = 0; done < cfg.iterations; ++done) {
    MlpGrads batch = MlpGrads::zeros_like(net);
    double batch_loss = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor >= order.size()) {
        close_epoch();
        rng.shuffle(order);
        cursor = 0;
      }
      const VectorXd& in = train_set.inputs[order[cursor]];
      const VectorXd& target = train_set.targets[order[cursor]];
      ++cursor;
      VectorXd err = mlp_forward(net, in) - target;
      batch_loss += err.squaredNorm();
      batch.add_scaled(mlp_backward(net, in, 2.0 * err).grads, 1.0);
    }
    batch.scale(1.0 / cfg.batch_size);
    opt_step(net, opt, batch);
    epoch_loss += batch_loss / cfg.batch_size;
    epoch_batches += 1;
  }
  close_epoch();
  return hist;
}

// --- quadrotor residual training -----------------------------------------------

// One data-collection flight: reference schedule, measured states, and the
// collector's integrator states (segment initial conditions).
struct QuadFlightData {
  std::vector<FlatRefSample> refs;
  std::vector<VectorXd> meas_states;  // 12-dim
  std::vector<Vector3d> integs;
};

// Adjoint training of the translational residual net through the closed
// loop: each segment rolls the 15-dim controller+model state from a measured
// initial condition and matches the measured 12-dim states.
inline LossHistory train_quad_residual(MlpNet& net, const std::vector<QuadFlightData>& flights,
                                       const QuadParams& model_params, const DfbcGains& gains,
                                       double Ts, const TrainConfig& cfg) {
  require(!flights.empty(), "train_quad_residual: no flights");
  struct Seg {
    int flight, start;
  };
  std::vector<Seg> segs;
  for (std::size_t f = 0; f < flights.size(); ++f) {
    int n = static_cast<int>(flights[f].meas_states.size());
    for (int s = 0; s + cfg.segment_len < n; s += cfg.segment_len)
      segs.push_back({static_cast<int>(f), s});
  }
  require(!segs.empty(), "train_quad_residual: flights too short for one segment");

  VectorXd w = VectorXd::Zero(QuadClosedLoopModel::kStateDim);
  w.head(12).setOnes();  // the integrator tail is not measured

  Rng rng(cfg.seed);
  OptimState opt = OptimState::make(cfg.optimizer, cfg.learning_rate, net);
  LossHistory hist;
  std::vector<int> order(segs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  std::size_t cursor = order.size();
  double epoch_loss = 0.0;
  int epoch_batches = 0;
  for (int done = 0; done < cfg.iterations; ++done) {
    MlpGrads batch = MlpGrads::zeros_like(net);
    double batch_loss = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor >= order.size()) {
        if (epoch_batches > 0) {
          hist.train.push_back(epoch_loss / epoch_batches);
          epoch_loss = 0.0;
          epoch_batches = 0;
        }
        rng.shuffle(order);
        cursor = 0;
      }
      const Seg& sg = segs[order[cursor++]];
      const QuadFlightData& fl = flights[sg.flight];

      std::vector<FlatRefSample> refs(fl.refs.begin() + sg.start,
                                      fl.refs.begin() + sg.start + cfg.segment_len);
      QuadClosedLoopModel model(model_params, gains, net, std::move(refs), Ts);

      QuadraticLoss loss;
      loss.weights = {w};
      for (int k = 1; k <= cfg.segment_len; ++k) {
        VectorXd r = VectorXd::Zero(QuadClosedLoopModel::kStateDim);
        r.head(12) = fl.meas_states[sg.start + k];
        loss.refs.push_back(std::move(r));
      }

      VectorXd X0(QuadClosedLoopModel::kStateDim);
      X0.head(12) = fl.meas_states[sg.start];
      X0.tail(3) = fl.integs[sg.start];

      double J = adjoint_gradient(model, X0, loss);
      batch.add_scaled(model.grads(), 1.0);
      batch_loss += J / cfg.segment_len;
    }
    batch.scale(1.0 / (cfg.batch_size * cfg.segment_len));
    opt_step(net, opt, batch);
    epoch_loss += batch_loss / cfg.batch_size;
    epoch_batches += 1;
  }
  if (epoch_batches > 0) hist.train.push_back(epoch_loss / epoch_batches);
  return hist;
}

}  // namespace fnn
