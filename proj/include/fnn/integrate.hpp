#pragma once

// Fixed-step explicit integrators and trajectory rollout. Ground truth is
// generated with RK4; learned models are rolled out with Euler so that the
// discrete one-step model used in training is exactly the one simulated.

#include <Eigen/Dense>
#include <fstream>
#include <string>
#include <vector>

#include "fnn/util/csv.hpp"
#include "fnn/util/errors.hpp"

namespace fnn {

using Eigen::VectorXd;

enum class Method { Euler, RK4 };

struct Trajectory {
  std::vector<double> times;
  std::vector<VectorXd> states;
  std::vector<VectorXd> inputs;  // empty, or aligned with times

  std::size_t size() const { return times.size(); }
  bool has_inputs() const { return !inputs.empty(); }
};

namespace detail {
inline void check_deriv_finite(const VectorXd& dx, double t) {
  if (!dx.allFinite())
    throw NumericError("non-finite derivative at t=" + std::to_string(t));
}
}  // namespace detail

// f(x, u, t) -> dx/dt. Inputs are held constant across a step.
template <typename F>
VectorXd euler_step(F&& f, const VectorXd& x, const VectorXd& u, double t, double Ts) {
  require(Ts > 0.0, "euler_step: Ts must be positive");
  VectorXd dx = f(x, u, t);
  detail::check_deriv_finite(dx, t);
  return x + Ts * dx;
}

template <typename F>
VectorXd rk4_step(F&& f, const VectorXd& x, const VectorXd& u, double t, double Ts) {
  require(Ts > 0.0, "rk4_step: Ts must be positive");
  VectorXd k1 = f(x, u, t);
  detail::check_deriv_finite(k1, t);
  VectorXd k2 = f(x + 0.5 * Ts * k1, u, t + 0.5 * Ts);
  detail::check_deriv_finite(k2, t);
  VectorXd k3 = f(x + 0.5 * Ts * k2, u, t + 0.5 * Ts);
  detail::check_deriv_finite(k3, t);
  VectorXd k4 = f(x + Ts * k3, u, t + Ts);
  detail::check_deriv_finite(k4, t);
  return x + (Ts / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

// Input schedule for autonomous systems.
inline VectorXd no_input(int, double) { return VectorXd(); }

// input_fn(step_index, t) -> input vector (size 0 for autonomous systems).
// Time stamps are t0 + k*Ts computed from the index, not accumulated, so the
// grid is uniform to roundoff.
template <typename F, typename U>
Trajectory rollout(F&& f, const VectorXd& x0, U&& input_fn, double t0, double Ts,
                   int n_steps, Method method, double diverge_bound = 1e6) {
  require(n_steps >= 1, "rollout: n_steps must be >= 1");
  require(Ts > 0.0, "rollout: Ts must be positive");
  Trajectory traj;
  traj.times.reserve(n_steps + 1);
  traj.states.reserve(n_steps + 1);
  traj.times.push_back(t0);
  traj.states.push_back(x0);
  VectorXd u0 = input_fn(0, t0);
  bool with_inputs = u0.size() > 0;
  if (with_inputs) traj.inputs.reserve(n_steps + 1);

  VectorXd x = x0;
  VectorXd u = u0;
  for (int k = 0; k < n_steps; ++k) {
    double t = t0 + k * Ts;
    if (k > 0) u = input_fn(k, t);
    if (with_inputs) traj.inputs.push_back(u);
    x = (method == Method::Euler) ? euler_step(f, x, u, t, Ts) : rk4_step(f, x, u, t, Ts);
    if (x.norm() > diverge_bound)
      throw NumericError("rollout diverged: state norm " + std::to_string(x.norm()) +
                         " at step " + std::to_string(k + 1));
    traj.times.push_back(t0 + (k + 1) * Ts);
    traj.states.push_back(x);
  }
  // Inputs align with times; the final input is the last one applied.
  if (with_inputs) traj.inputs.push_back(u);
  return traj;
}

inline void save_trajectory_csv(const Trajectory& traj, const std::string& path) {
  require(!traj.times.empty(), "save_trajectory_csv: empty trajectory");
  int n = static_cast<int>(traj.states.front().size());
  int m = traj.has_inputs() ? static_cast<int>(traj.inputs.front().size()) : 0;
  std::vector<std::string> cols = {"t"};
  for (int i = 0; i < n; ++i) cols.push_back("x" + std::to_string(i));
  for (int i = 0; i < m; ++i) cols.push_back("u" + std::to_string(i));
  CsvWriter w(path, cols);
  std::vector<double> row(1 + n + m);
  for (std::size_t k = 0; k < traj.times.size(); ++k) {
    row[0] = traj.times[k];
    for (int i = 0; i < n; ++i) row[1 + i] = traj.states[k](i);
    for (int i = 0; i < m; ++i) row[1 + n + i] = traj.inputs[k](i);
    w.row(row);
  }
}

inline Trajectory load_trajectory_csv(const std::string& path) {
  CsvTable table = read_csv(path);
  require(!table.header.empty() && table.header[0] == "t",
          "trajectory csv must start with column t");
  int n = 0, m = 0;
  for (std::size_t i = 1; i < table.header.size(); ++i) {
    const std::string& c = table.header[i];
    if (c == "x" + std::to_string(n)) {
      ++n;
    } else if (c == "u" + std::to_string(m)) {
      ++m;
    } else {
      throw ConfigError("unexpected trajectory csv column: " + c);
    }
  }
  Trajectory traj;
  for (const auto& row : table.rows) {
    traj.times.push_back(row[0]);
    VectorXd x(n);
    for (int i = 0; i < n; ++i) x(i) = row[1 + i];
    traj.states.push_back(std::move(x));
    if (m > 0) {
      VectorXd u(m);
      for (int i = 0; i < m; ++i) u(i) = row[1 + n + i];
      traj.inputs.push_back(std::move(u));
    }
  }
  for (std::size_t k = 1; k < traj.times.size(); ++k)
    require(traj.times[k] > traj.times[k - 1], "trajectory times must be strictly increasing");
  return traj;
}

}  // namespace fnn
