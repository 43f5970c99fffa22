#pragma once

// Interpolants backing the trajectory generator: a natural cubic spline per
// position axis (C2, analytic first and second derivatives) and a segment-wise
// quaternion curve q(t) = q_i * exp(s(u) * log(q_i^-1 q_{i+1})) with a quintic
// smoothstep s, so the body rate is phi * ds/dt along a fixed axis per segment
// and vanishes smoothly at the knots.

#include <stdexcept>
#include <vector>

#include "fathom/geom.hpp"

namespace fathom {

class CubicSpline {
 public:
  CubicSpline() = default;

  CubicSpline(std::vector<double> ts, std::vector<Vec3> ys) : t_(std::move(ts)), y_(std::move(ys)) {
    if (t_.size() != y_.size() || t_.empty()) throw std::invalid_argument("spline: bad knot arrays");
    for (size_t i = 1; i < t_.size(); ++i)
      if (!(t_[i] > t_[i - 1])) throw std::invalid_argument("spline: knots not strictly increasing");
    m_.assign(t_.size(), Vec3::Zero());
    const size_t n = t_.size();
    if (n > 2) {
      // Thomas algorithm for the natural-boundary tridiagonal system, per axis.
      std::vector<double> h(n - 1);
      for (size_t i = 0; i + 1 < n; ++i) h[i] = t_[i + 1] - t_[i];
      std::vector<double> diag(n - 2), upper(n - 2);
      std::vector<Vec3> rhs(n - 2);
      for (size_t i = 0; i < n - 2; ++i) {
        diag[i] = 2.0 * (h[i] + h[i + 1]);
        upper[i] = h[i + 1];
        rhs[i] = 6.0 * ((y_[i + 2] - y_[i + 1]) / h[i + 1] - (y_[i + 1] - y_[i]) / h[i]);
      }
      for (size_t i = 1; i < n - 2; ++i) {
        const double w = h[i] / diag[i - 1];
        diag[i] -= w * upper[i - 1];
        rhs[i] -= w * rhs[i - 1];
      }
      for (size_t i = n - 2; i-- > 0;) {
        Vec3 v = rhs[i];
        if (i + 1 < n - 2) v -= upper[i] * m_[i + 2];
        m_[i + 1] = v / diag[i];
      }
    }
  }

  Vec3 value(double t) const { return eval(t, 0); }
  Vec3 derivative(double t) const { return eval(t, 1); }
  Vec3 second_derivative(double t) const { return eval(t, 2); }

  double t_min() const { return t_.front(); }
  double t_max() const { return t_.back(); }

 private:
  Vec3 eval(double t, int order) const {
    if (t_.size() == 1) return order == 0 ? y_[0] : Vec3::Zero();
    const size_t i = segment(t);
    const double h = t_[i + 1] - t_[i];
    const double a = (t_[i + 1] - t) / h, b = (t - t_[i]) / h;
    switch (order) {
      case 0:
        return a * y_[i] + b * y_[i + 1] +
               ((a * a * a - a) * m_[i] + (b * b * b - b) * m_[i + 1]) * h * h / 6.0;
      case 1:
        return (y_[i + 1] - y_[i]) / h +
               h / 6.0 * (-(3 * a * a - 1) * m_[i] + (3 * b * b - 1) * m_[i + 1]);
      default:
        return a * m_[i] + b * m_[i + 1];
    }
  }

  size_t segment(double t) const {
    size_t lo = 0, hi = t_.size() - 1;
    while (hi - lo > 1) {
      const size_t mid = (lo + hi) / 2;
      (t_[mid] <= t ? lo : hi) = mid;
    }
    return lo;
  }

  std::vector<double> t_;
  std::vector<Vec3> y_;
  std::vector<Vec3> m_;  // second derivatives at knots
};

class RotationSpline {
 public:
  RotationSpline() = default;

  RotationSpline(std::vector<double> ts, std::vector<Quat> qs) : t_(std::move(ts)), q_(std::move(qs)) {
    if (t_.size() != q_.size() || t_.empty()) throw std::invalid_argument("rotation spline: bad knots");
    for (size_t i = 1; i < t_.size(); ++i)
      if (!(t_[i] > t_[i - 1])) throw std::invalid_argument("rotation spline: knots not increasing");
    phi_.resize(t_.size() > 1 ? t_.size() - 1 : 0);
    for (size_t i = 0; i + 1 < t_.size(); ++i) phi_[i] = quat_log(q_[i].conjugate() * q_[i + 1]);
  }

  // Returns orientation, body angular rate and body angular acceleration.
  void sample(double t, Quat* q, Vec3* w_body, Vec3* dw_body) const {
    if (t_.size() == 1) {
      if (q) *q = q_[0];
      if (w_body) w_body->setZero();
      if (dw_body) dw_body->setZero();
      return;
    }
    size_t lo = 0, hi = t_.size() - 1;
    while (hi - lo > 1) {
      const size_t mid = (lo + hi) / 2;
      (t_[mid] <= t ? lo : hi) = mid;
    }
    const double h = t_[lo + 1] - t_[lo];
    const double u = clamp((t - t_[lo]) / h, 0.0, 1.0);
    const double s = ((6 * u - 15) * u + 10) * u * u * u;
    const double ds = ((30 * u - 60) * u + 30) * u * u / h;
    const double dds = ((120 * u - 180) * u + 60) * u / (h * h);
    if (q) *q = quat_canonical(q_[lo] * quat_exp(s * phi_[lo]));
    if (w_body) *w_body = ds * phi_[lo];
    if (dw_body) *dw_body = dds * phi_[lo];
  }

 private:
  std::vector<double> t_;
  std::vector<Quat> q_;
  std::vector<Vec3> phi_;
};

}  // namespace fathom
