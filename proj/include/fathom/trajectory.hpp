#pragma once

// Continuous-time reference trajectory: timestamped control poses interpolated
// by a cubic position spline and a segment-wise quaternion curve. Sampling
// yields pose plus the analytic derivatives the IMU synthesizer needs.

#include <stdexcept>
#include <utility>
#include <vector>

#include "fathom/spline.hpp"

namespace fathom {

struct TrajectorySpec {
  std::vector<double> times;  // strictly increasing, times.front() == 0
  std::vector<Pose> poses;    // T_wb at each control time
  double duration = 0.0;      // equals times.back()
  double sample_rate_hz = 100.0;
};

struct TrajectorySample {
  Pose T_wb;
  Vec3 v_w;   // world-frame velocity
  Vec3 a_w;   // world-frame acceleration
  Vec3 w_b;   // body-frame angular rate
  Vec3 dw_b;  // body-frame angular acceleration
};

class Trajectory {
 public:
  explicit Trajectory(const TrajectorySpec& spec) : duration_(spec.duration) {
    if (spec.poses.empty() || spec.times.size() != spec.poses.size())
      throw std::invalid_argument("trajectory: control pose list malformed");
    if (spec.times.front() != 0.0 || spec.times.back() != spec.duration)
      throw std::invalid_argument("trajectory: control times must span [0, duration]");
    std::vector<Vec3> ps;
    std::vector<Quat> qs;
    ps.reserve(spec.poses.size());
    qs.reserve(spec.poses.size());
    for (const Pose& p : spec.poses) {
      ps.push_back(p.t);
      qs.push_back(p.q);
    }
    pos_ = CubicSpline(spec.times, std::move(ps));
    rot_ = RotationSpline(spec.times, std::move(qs));
  }

  TrajectorySample sample(double t) const {
    if (t < 0.0 || t > duration_) throw std::out_of_range("trajectory: sample time outside [0, duration]");
    TrajectorySample s;
    rot_.sample(t, &s.T_wb.q, &s.w_b, &s.dw_b);
    s.T_wb.t = pos_.value(t);
    s.v_w = pos_.derivative(t);
    s.a_w = pos_.second_derivative(t);
    return s;
  }

  double duration() const { return duration_; }

 private:
  double duration_;
  CubicSpline pos_;
  RotationSpline rot_;
};

inline TrajectorySample sample_trajectory(const TrajectorySpec& spec, double t) {
  return Trajectory(spec).sample(t);
}

}  // namespace fathom
