#pragma once

// Rotation and rigid-transform primitives shared by every module.
//
// Conventions, used consistently across the codebase:
//  * Hamilton quaternions (Eigen), written w-first in text and files.
//  * q_wb rotates body-frame vectors into the world frame.
//  * Canonical sign: w >= 0. Every constructor and normalization enforces it.
//  * Pose composition a * b applies b first, then a.
//  * Twist is the (rotation vector, translation) chart used as the optimizer's
//    local parameterization: exp applies the rotation vector via quat_exp and
//    carries the translation verbatim, so exp and log are mutually inverse.

#include <cmath>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>

#include "fathom/core.hpp"

namespace fathom {

using Quat = Eigen::Quaterniond;

// Below this angle (rad), trig ratios switch to their Taylor expansions.
constexpr double kSmallAngle = 1e-8;

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

inline Quat quat_canonical(Quat q) {
  // Skip renormalization when the norm is already right: canonicalizing twice
  // must be bitwise stable (serialized poses round trip exactly).
  if (std::abs(q.squaredNorm() - 1.0) > 1e-12) q.normalize();
  if (q.w() < 0) q.coeffs() = -q.coeffs();
  return q;
}

// Rotation vector -> unit quaternion.
inline Quat quat_exp(const Vec3& theta) {
  const double angle = theta.norm();
  double w, k;
  if (angle < kSmallAngle) {
    w = 1.0 - angle * angle / 8.0;
    k = 0.5 - angle * angle / 48.0;
  } else {
    w = std::cos(0.5 * angle);
    k = std::sin(0.5 * angle) / angle;
  }
  return quat_canonical(Quat(w, k * theta.x(), k * theta.y(), k * theta.z()));
}

// Unit quaternion -> rotation vector, angle in [0, pi].
inline Vec3 quat_log(const Quat& q_in) {
  const Quat q = quat_canonical(q_in);
  const Vec3 v = q.vec();
  const double vn = v.norm();
  if (vn < kSmallAngle) return 2.0 / q.w() * v;
  const double angle = 2.0 * std::atan2(vn, q.w());
  return angle / vn * v;
}

// Right Jacobian of the SO(3) exponential: quat_exp(v + d) ~= quat_exp(v) *
// quat_exp(so3_right_jacobian(v) * d) to first order in d.
inline Mat3 so3_right_jacobian(const Vec3& v) {
  const double angle = v.norm();
  const Mat3 s = skew(v);
  double c1, c2;
  if (angle < kSmallAngle) {
    c1 = 0.5 - angle * angle / 24.0;
    c2 = 1.0 / 6.0 - angle * angle / 120.0;
  } else {
    c1 = (1.0 - std::cos(angle)) / (angle * angle);
    c2 = (angle - std::sin(angle)) / (angle * angle * angle);
  }
  return Mat3::Identity() - c1 * s + c2 * s * s;
}

// 4x4 matrices of left/right quaternion multiplication acting on [w; xyz]:
// q (x) p = Ql(q) [pw; pv]   and   p (x) q = Qr(q) [pw; pv].
inline Mat4 quat_left(const Quat& q) {
  Mat4 m;
  m(0, 0) = q.w();
  m.block<1, 3>(0, 1) = -q.vec().transpose();
  m.block<3, 1>(1, 0) = q.vec();
  m.block<3, 3>(1, 1) = q.w() * Mat3::Identity() + skew(q.vec());
  return m;
}

inline Mat4 quat_right(const Quat& q) {
  Mat4 m;
  m(0, 0) = q.w();
  m.block<1, 3>(0, 1) = -q.vec().transpose();
  m.block<3, 1>(1, 0) = q.vec();
  m.block<3, 3>(1, 1) = q.w() * Mat3::Identity() - skew(q.vec());
  return m;
}

struct Twist {
  Vec3 rot = Vec3::Zero();    // radians
  Vec3 trans = Vec3::Zero();  // metres
};

struct Pose {
  Quat q;
  Vec3 t;

  Pose() : q(1, 0, 0, 0), t(Vec3::Zero()) {}
  Pose(const Quat& q_, const Vec3& t_) : q(quat_canonical(q_)), t(t_) {}

  Mat3 R() const { return q.toRotationMatrix(); }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.block<3, 3>(0, 0) = R();
    m.block<3, 1>(0, 3) = t;
    return m;
  }

  Pose operator*(const Pose& o) const { return Pose(q * o.q, q * o.t + t); }
  Vec3 operator*(const Vec3& p) const { return q * p + t; }

  Pose inverse() const {
    const Quat qi = q.conjugate();
    return Pose(qi, -(qi * t));
  }

  static Pose exp(const Twist& x) { return Pose(quat_exp(x.rot), x.trans); }
  Twist log() const { return Twist{quat_log(q), t}; }
};

// Geodesic angle (rad) between two rotations.
inline double rotation_angle(const Quat& a, const Quat& b) {
  return quat_log(a.conjugate() * b).norm();
}

// Max of rotation angle (rad) and translation distance (m); handy in tests.
inline double pose_distance(const Pose& a, const Pose& b) {
  return std::max(rotation_angle(a.q, b.q), (a.t - b.t).norm());
}

// Closed-form rigid alignment dst = R * src + t: centroid subtraction + SVD of
// the cross-covariance with a reflection guard. Needs >= 3 non-collinear pairs
// for a unique answer; the caller gates that.
inline Pose rigid_align(const std::vector<Vec3>& src, const std::vector<Vec3>& dst) {
  if (src.size() != dst.size() || src.empty())
    throw std::invalid_argument("rigid_align: point sets must match and be non-empty");
  Vec3 cs = Vec3::Zero(), cd = Vec3::Zero();
  for (size_t i = 0; i < src.size(); ++i) {
    cs += src[i];
    cd += dst[i];
  }
  cs /= static_cast<double>(src.size());
  cd /= static_cast<double>(src.size());
  Mat3 H = Mat3::Zero();
  for (size_t i = 0; i < src.size(); ++i) H += (src[i] - cs) * (dst[i] - cd).transpose();
  const Eigen::JacobiSVD<Mat3> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 D = Mat3::Identity();
  D(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0 : 1.0;
  const Mat3 R = svd.matrixV() * D * svd.matrixU().transpose();
  return Pose(Quat(R), cd - R * cs);
}

}  // namespace fathom
