#pragma once

#include <array>
#include <cmath>
#include <cstddef>

namespace fnn {

// Forward-mode dual number carrying N derivative channels. One evaluation of
// a scalar-generic function with seeded channels yields N columns of its
// Jacobian exactly (to roundoff), which is how the closed-loop quadrotor step
// and the shooting predictor expose derivatives without a tape.
template <int N>
struct Dual {
  double v = 0.0;
  std::array<double, N> d{};

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT: implicit from constants

  static Dual seeded(double value, int channel) {
    Dual x(value);
    x.d[channel] = 1.0;
    return x;
  }

  Dual& operator+=(const Dual& o) {
    v += o.v;
    for (int i = 0; i < N; ++i) d[i] += o.d[i];
    return *this;
  }
  Dual& operator-=(const Dual& o) {
    v -= o.v;
    for (int i = 0; i < N; ++i) d[i] -= o.d[i];
    return *this;
  }
  Dual& operator*=(const Dual& o) {
    for (int i = 0; i < N; ++i) d[i] = d[i] * o.v + v * o.d[i];
    v *= o.v;
    return *this;
  }
  Dual operator-() const {
    Dual r(-v);
    for (int i = 0; i < N; ++i) r.d[i] = -d[i];
    return r;
  }

  friend Dual operator+(Dual a, const Dual& b) { return a += b; }
  friend Dual operator-(Dual a, const Dual& b) { return a -= b; }
  friend Dual operator*(Dual a, const Dual& b) { return a *= b; }
  friend Dual operator/(const Dual& a, const Dual& b) {
    Dual r(a.v / b.v);
    double inv = 1.0 / b.v;
    for (int i = 0; i < N; ++i) r.d[i] = (a.d[i] - r.v * b.d[i]) * inv;
    return r;
  }

  friend bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
  friend bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }
  friend bool operator<=(const Dual& a, const Dual& b) { return a.v <= b.v; }
  friend bool operator>=(const Dual& a, const Dual& b) { return a.v >= b.v; }
};

template <int N>
inline Dual<N> sqrt(const Dual<N>& x) {
  Dual<N> r(std::sqrt(x.v));
  double g = 0.5 / r.v;
  for (int i = 0; i < N; ++i) r.d[i] = g * x.d[i];
  return r;
}

template <int N>
inline Dual<N> exp(const Dual<N>& x) {
  Dual<N> r(std::exp(x.v));
  for (int i = 0; i < N; ++i) r.d[i] = r.v * x.d[i];
  return r;
}

template <int N>
inline Dual<N> sin(const Dual<N>& x) {
  Dual<N> r(std::sin(x.v));
  double c = std::cos(x.v);
  for (int i = 0; i < N; ++i) r.d[i] = c * x.d[i];
  return r;
}

template <int N>
inline Dual<N> cos(const Dual<N>& x) {
  Dual<N> r(std::cos(x.v));
  double s = -std::sin(x.v);
  for (int i = 0; i < N; ++i) r.d[i] = s * x.d[i];
  return r;
}

template <int N>
inline Dual<N> tan(const Dual<N>& x) {
  Dual<N> r(std::tan(x.v));
  double g = 1.0 + r.v * r.v;
  for (int i = 0; i < N; ++i) r.d[i] = g * x.d[i];
  return r;
}

template <int N>
inline Dual<N> asin(const Dual<N>& x) {
  Dual<N> r(std::asin(x.v));
  double g = 1.0 / std::sqrt(1.0 - x.v * x.v);
  for (int i = 0; i < N; ++i) r.d[i] = g * x.d[i];
  return r;
}

template <int N>
inline Dual<N> atan2(const Dual<N>& y, const Dual<N>& x) {
  Dual<N> r(std::atan2(y.v, x.v));
  double g = 1.0 / (x.v * x.v + y.v * y.v);
  for (int i = 0; i < N; ++i) r.d[i] = g * (x.v * y.d[i] - y.v * x.d[i]);
  return r;
}

// ReLU and clamps: subgradient 0 at the kink, matching the double overloads.
template <int N>
inline Dual<N> relu(const Dual<N>& x) {
  return x.v > 0.0 ? x : Dual<N>(0.0);
}
inline double relu(double x) { return x > 0.0 ? x : 0.0; }

template <int N>
inline Dual<N> clamp(const Dual<N>& x, double lo, double hi) {
  if (x.v < lo) return Dual<N>(lo);
  if (x.v > hi) return Dual<N>(hi);
  return x;
}
inline double clamp(double x, double lo, double hi) {
  return x < lo ? lo : (x > hi ? hi : x);
}

template <int N>
inline double value(const Dual<N>& x) {
  return x.v;
}
inline double value(double x) { return x; }

// Scalar-generic sqrt/trig dispatch for templated numerics code.
using std::asin;
using std::atan2;
using std::cos;
using std::exp;
using std::sin;
using std::sqrt;
using std::tan;

}  // namespace fnn
