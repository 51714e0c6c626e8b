#pragma once

// Dense ReLU feedforward networks with analytic forward/backward passes and
// stochastic optimizers. This is the only learnable function representation
// in the library; everything that trains, trains one of these.

#include <Eigen/Dense>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fnn/util/dual.hpp"
#include "fnn/util/errors.hpp"
#include "fnn/util/rng.hpp"

namespace fnn {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct MlpNet {
  std::vector<int> layer_sizes;     // input dim ... output dim
  std::vector<MatrixXd> weights;    // [k]: (layer_sizes[k+1] x layer_sizes[k])
  std::vector<VectorXd> biases;     // [k]: layer_sizes[k+1]
  std::uint64_t init_seed = 0;

  int input_dim() const { return layer_sizes.front(); }
  int output_dim() const { return layer_sizes.back(); }
  int num_layers() const { return static_cast<int>(weights.size()); }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < weights.size(); ++k)
      n += static_cast<std::size_t>(weights[k].size()) + biases[k].size();
    return n;
  }
};

// Glorot-uniform initialization, +-sqrt(6/(n_in+n_out)), from an explicit
// seed so that repeated trials are reproducible.
inline MlpNet make_mlp(const std::vector<int>& layer_sizes, std::uint64_t seed) {
  require(layer_sizes.size() >= 2, "network needs at least input and output dims");
  for (int s : layer_sizes) require(s > 0, "layer sizes must be positive");
  MlpNet net;
  net.layer_sizes = layer_sizes;
  net.init_seed = seed;
  Rng rng(seed);
  for (std::size_t k = 0; k + 1 < layer_sizes.size(); ++k) {
    int n_in = layer_sizes[k], n_out = layer_sizes[k + 1];
    double bound = std::sqrt(6.0 / (n_in + n_out));
    MatrixXd w(n_out, n_in);
    for (int i = 0; i < n_out; ++i)
      for (int j = 0; j < n_in; ++j) w(i, j) = rng.uniform(-bound, bound);
    net.weights.push_back(std::move(w));
    net.biases.push_back(VectorXd::Zero(n_out));
  }
  return net;
}

// ReLU on hidden layers, identity on the output layer. The ReLU subgradient
// at exactly 0 is taken as 0.
inline VectorXd mlp_forward(const MlpNet& net, const VectorXd& x) {
  require(x.size() == net.input_dim(), "mlp_forward: input dimension mismatch");
  VectorXd a = x;
  for (int k = 0; k < net.num_layers(); ++k) {
    VectorXd z = net.weights[k] * a + net.biases[k];
    if (k + 1 < net.num_layers()) z = z.cwiseMax(0.0);
    a = std::move(z);
  }
  return a;
}

// Scalar-generic forward pass, used with Dual<N> to push derivative channels
// through models that embed a network. Bit-identical arithmetic order to
// mlp_forward when T = double is not required anywhere; only values matter.
template <typename T>
inline std::vector<T> mlp_forward_generic(const MlpNet& net, const std::vector<T>& x) {
  require(static_cast<int>(x.size()) == net.input_dim(),
          "mlp_forward_generic: input dimension mismatch");
  std::vector<T> a = x;
  std::vector<T> z;
  for (int k = 0; k < net.num_layers(); ++k) {
    const MatrixXd& w = net.weights[k];
    const VectorXd& b = net.biases[k];
    z.assign(w.rows(), T(0.0));
    for (int i = 0; i < w.rows(); ++i) {
      T acc(b(i));
      for (int j = 0; j < w.cols(); ++j) acc += T(w(i, j)) * a[j];
      z[i] = (k + 1 < net.num_layers()) ? relu(acc) : acc;
    }
    a = z;
  }
  return a;
}

struct MlpGrads {
  std::vector<MatrixXd> d_weights;
  std::vector<VectorXd> d_biases;

  static MlpGrads zeros_like(const MlpNet& net) {
    MlpGrads g;
    for (int k = 0; k < net.num_layers(); ++k) {
      g.d_weights.emplace_back(MatrixXd::Zero(net.weights[k].rows(), net.weights[k].cols()));
      g.d_biases.emplace_back(VectorXd::Zero(net.biases[k].size()));
    }
    return g;
  }

  void add_scaled(const MlpGrads& o, double s) {
    for (std::size_t k = 0; k < d_weights.size(); ++k) {
      d_weights[k] += s * o.d_weights[k];
      d_biases[k] += s * o.d_biases[k];
    }
  }

  void scale(double s) {
    for (std::size_t k = 0; k < d_weights.size(); ++k) {
      d_weights[k] *= s;
      d_biases[k] *= s;
    }
  }
};

struct BackwardResult {
  MlpGrads grads;
  VectorXd input_grad;
};

// Vector-Jacobian product: gradients of <out_grad, f(x)> with respect to all
// parameters and to the input.
inline BackwardResult mlp_backward(const MlpNet& net, const VectorXd& x,
                                   const VectorXd& out_grad) {
  require(x.size() == net.input_dim(), "mlp_backward: input dimension mismatch");
  require(out_grad.size() == net.output_dim(), "mlp_backward: out_grad dimension mismatch");

  // Forward, keeping post-activation values per layer.
  std::vector<VectorXd> acts;  // acts[0] = x, acts[k+1] = activation after layer k
  acts.reserve(net.num_layers() + 1);
  acts.push_back(x);
  for (int k = 0; k < net.num_layers(); ++k) {
    VectorXd z = net.weights[k] * acts.back() + net.biases[k];
    if (k + 1 < net.num_layers()) z = z.cwiseMax(0.0);
    acts.push_back(std::move(z));
  }

  BackwardResult res;
  res.grads = MlpGrads::zeros_like(net);
  VectorXd delta = out_grad;
  for (int k = net.num_layers() - 1; k >= 0; --k) {
    if (k + 1 < net.num_layers()) {
      // ReLU mask: acts[k+1] > 0 iff the pre-activation was > 0.
      for (int i = 0; i < delta.size(); ++i)
        if (acts[k + 1](i) <= 0.0) delta(i) = 0.0;
    }
    res.grads.d_weights[k] = delta * acts[k].transpose();
    res.grads.d_biases[k] = delta;
    delta = net.weights[k].transpose() * delta;
  }
  res.input_grad = std::move(delta);
  return res;
}

// Full input Jacobian (output_dim x input_dim) via one backward pass per row.
inline MatrixXd mlp_input_jacobian(const MlpNet& net, const VectorXd& x) {
  MatrixXd jac(net.output_dim(), net.input_dim());
  VectorXd e = VectorXd::Zero(net.output_dim());
  for (int r = 0; r < net.output_dim(); ++r) {
    e(r) = 1.0;
    jac.row(r) = mlp_backward(net, x, e).input_grad.transpose();
    e(r) = 0.0;
  }
  return jac;
}

struct OptimState {
  enum class Kind { RMSprop, Adam };
  Kind kind = Kind::RMSprop;
  double learning_rate = 1e-3;
  double rmsprop_decay = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  std::vector<MatrixXd> m_w, v_w;  // first/second moments, weight-shaped
  std::vector<VectorXd> m_b, v_b;

  static OptimState make(Kind kind, double lr, const MlpNet& net) {
    OptimState o;
    o.kind = kind;
    o.learning_rate = lr;
    for (int k = 0; k < net.num_layers(); ++k) {
      o.m_w.emplace_back(MatrixXd::Zero(net.weights[k].rows(), net.weights[k].cols()));
      o.v_w.emplace_back(MatrixXd::Zero(net.weights[k].rows(), net.weights[k].cols()));
      o.m_b.emplace_back(VectorXd::Zero(net.biases[k].size()));
      o.v_b.emplace_back(VectorXd::Zero(net.biases[k].size()));
    }
    return o;
  }
};

namespace detail {

inline void check_finite_grads(const MlpGrads& g) {
  for (std::size_t k = 0; k < g.d_weights.size(); ++k) {
    if (!g.d_weights[k].allFinite() || !g.d_biases[k].allFinite())
      throw NumericError("non-finite gradient in layer " + std::to_string(k));
  }
}

template <typename Arr>
inline void apply_update(Arr& param, Arr& m, Arr& v, const Arr& g, OptimState& o) {
  if (o.kind == OptimState::Kind::RMSprop) {
    v = o.rmsprop_decay * v + (1.0 - o.rmsprop_decay) * g.cwiseProduct(g);
    param -= o.learning_rate *
             g.cwiseQuotient(v.cwiseSqrt() + Arr::Constant(v.rows(), v.cols(), o.epsilon));
  } else {
    m = o.adam_beta1 * m + (1.0 - o.adam_beta1) * g;
    v = o.adam_beta2 * v + (1.0 - o.adam_beta2) * g.cwiseProduct(g);
    double bc1 = 1.0 - std::pow(o.adam_beta1, static_cast<double>(o.step));
    double bc2 = 1.0 - std::pow(o.adam_beta2, static_cast<double>(o.step));
    Arr m_hat = m / bc1;
    Arr v_hat = v / bc2;
    param -= o.learning_rate *
             m_hat.cwiseQuotient(v_hat.cwiseSqrt() + Arr::Constant(v.rows(), v.cols(), o.epsilon));
  }
}

}  // namespace detail

inline void opt_step(MlpNet& net, OptimState& opt, const MlpGrads& grads) {
  require(grads.d_weights.size() == net.weights.size(), "opt_step: gradient shape mismatch");
  detail::check_finite_grads(grads);
  opt.step += 1;
  for (int k = 0; k < net.num_layers(); ++k) {
    detail::apply_update(net.weights[k], opt.m_w[k], opt.v_w[k], grads.d_weights[k], opt);
    detail::apply_update(net.biases[k], opt.m_b[k], opt.v_b[k], grads.d_biases[k], opt);
  }
}

// Last hidden activation together with the output layer viewed as a flat
// weight vector. Writing the flat vector row-major means segment i of length
// l holds the weights producing output coordinate i, so the regressor matrix
// mapping head weights to outputs is block-structured and never needs to be
// materialized.
struct PenultimateFeatures {
  VectorXd features;      // last hidden activation, length l
  VectorXd head_weights;  // row-major flat view of the output weight matrix, length n*l
  VectorXd head_bias;     // length n
};

inline PenultimateFeatures features_and_head(const MlpNet& net, const VectorXd& x) {
  require(net.num_layers() >= 2, "features_and_head: network has no hidden layer");
  VectorXd a = x;
  for (int k = 0; k + 1 < net.num_layers(); ++k)
    a = (net.weights[k] * a + net.biases[k]).cwiseMax(0.0);
  const MatrixXd& w = net.weights.back();
  PenultimateFeatures f;
  f.features = std::move(a);
  f.head_weights = VectorXd(w.size());
  for (int i = 0; i < w.rows(); ++i)
    for (int j = 0; j < w.cols(); ++j) f.head_weights(i * w.cols() + j) = w(i, j);
  f.head_bias = net.biases.back();
  return f;
}

// Reassembles the output-layer matrix from a flat head vector and applies it
// with the same expression the forward pass uses, so recombination with the
// unmodified head reproduces mlp_forward bit-for-bit.
inline VectorXd recombine_head(const PenultimateFeatures& f, const VectorXd& head_weights) {
  int n = static_cast<int>(f.head_bias.size());
  int l = static_cast<int>(f.features.size());
  require(head_weights.size() == static_cast<Eigen::Index>(n) * l,
          "recombine_head: head weight length mismatch");
  MatrixXd w(n, l);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < l; ++j) w(i, j) = head_weights(i * l + j);
  return w * f.features + f.head_bias;
}

inline VectorXd recombine_head(const PenultimateFeatures& f) {
  return recombine_head(f, f.head_weights);
}

// Writes a flat head vector back into the network's output layer.
inline void set_head(MlpNet& net, const VectorXd& head_weights) {
  MatrixXd& w = net.weights.back();
  require(head_weights.size() == w.size(), "set_head: head weight length mismatch");
  for (int i = 0; i < w.rows(); ++i)
    for (int j = 0; j < w.cols(); ++j) w(i, j) = head_weights(i * w.cols() + j);
}

// --- checkpoint format -----------------------------------------------------
//
// A checkpoint is a single JSON document: format_version, layer_sizes,
// row-major weight arrays, bias arrays, and the init seed. JSON doubles are
// emitted with shortest round-trip representation, so save/load is
// value-exact for finite doubles.

inline nlohmann::json checkpoint_json(const MlpNet& net) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["layer_sizes"] = net.layer_sizes;
  j["seed"] = net.init_seed;
  auto weights = nlohmann::json::array();
  auto biases = nlohmann::json::array();
  for (int k = 0; k < net.num_layers(); ++k) {
    std::vector<double> w(net.weights[k].size());
    for (int i = 0; i < net.weights[k].rows(); ++i)
      for (int c = 0; c < net.weights[k].cols(); ++c)
        w[i * net.weights[k].cols() + c] = net.weights[k](i, c);
    weights.push_back(w);
    std::vector<double> b(net.biases[k].data(), net.biases[k].data() + net.biases[k].size());
    biases.push_back(b);
  }
  j["weights"] = std::move(weights);
  j["biases"] = std::move(biases);
  return j;
}

inline void save_checkpoint(const MlpNet& net, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open checkpoint for writing: " + path);
  out << checkpoint_json(net).dump(1) << "\n";
}

inline MlpNet mlp_from_json(const nlohmann::json& j) {
  if (!j.contains("format_version") || j["format_version"].get<int>() != 1)
    throw ConfigError("unsupported checkpoint format_version");
  MlpNet net;
  net.layer_sizes = j.at("layer_sizes").get<std::vector<int>>();
  net.init_seed = j.value("seed", std::uint64_t{0});
  const auto& weights = j.at("weights");
  const auto& biases = j.at("biases");
  if (weights.size() + 1 != net.layer_sizes.size() || biases.size() != weights.size())
    throw ConfigError("checkpoint layer count mismatch");
  for (std::size_t k = 0; k + 1 < net.layer_sizes.size(); ++k) {
    int rows = net.layer_sizes[k + 1], cols = net.layer_sizes[k];
    auto w = weights[k].get<std::vector<double>>();
    auto b = biases[k].get<std::vector<double>>();
    if (static_cast<int>(w.size()) != rows * cols || static_cast<int>(b.size()) != rows)
      throw ConfigError("checkpoint tensor shape mismatch at layer " + std::to_string(k));
    MatrixXd wm(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int c = 0; c < cols; ++c) wm(i, c) = w[i * cols + c];
    net.weights.push_back(std::move(wm));
    net.biases.push_back(Eigen::Map<VectorXd>(b.data(), rows));
  }
  return net;
}

inline MlpNet load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint json: ") + e.what());
  }
  return mlp_from_json(j);
}

// Bitwise parameter equality; used to assert that training the feedback unit
// leaves the frozen dynamics network untouched.
inline bool mlp_params_equal(const MlpNet& a, const MlpNet& b) {
  if (a.layer_sizes != b.layer_sizes) return false;
  for (int k = 0; k < a.num_layers(); ++k) {
    if (std::memcmp(a.weights[k].data(), b.weights[k].data(),
                    sizeof(double) * a.weights[k].size()) != 0)
      return false;
    if (std::memcmp(a.biases[k].data(), b.biases[k].data(),
                    sizeof(double) * a.biases[k].size()) != 0)
      return false;
  }
  return true;
}

}  // namespace fnn
