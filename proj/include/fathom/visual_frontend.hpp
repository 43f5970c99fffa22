#pragma once

// Landmark store, stereo triangulation, and the reprojection residual.
// Landmarks are plain world-frame 3D points; association comes from landmark
// ids carried by the observations (no descriptor matching here).

#include <map>
#include <stdexcept>
#include <vector>

#include "fathom/imu.hpp"
#include "fathom/sensors.hpp"

namespace fathom {

struct Landmark {
  int id = -1;
  Vec3 p_w = Vec3::Zero();
  Rgb8 color{0, 0, 0};
};

struct Observation {
  int cam = 0;          // 0 left, 1 right
  int landmark_id = -1;
  int keyframe_id = -1;
  Vec2 pixel = Vec2::Zero();
};

class LandmarkStore {
 public:
  bool has(int id) const { return items_.count(id) != 0; }
  const Landmark& get(int id) const { return items_.at(id); }
  Landmark& get(int id) { return items_.at(id); }
  void add(const Landmark& lm) {
    if (!items_.emplace(lm.id, lm).second)
      throw std::invalid_argument("LandmarkStore: duplicate id " + std::to_string(lm.id));
  }
  size_t size() const { return items_.size(); }
  const std::map<int, Landmark>& items() const { return items_; }
  std::map<int, Landmark> snapshot() const { return items_; }

 private:
  std::map<int, Landmark> items_;
};

// Rectified-pair triangulation. Returns the world-frame point.
inline Vec3 triangulate(const Vec2& obs_left, const Vec2& obs_right, const CameraIntrinsics& intr,
                        const Pose& T_WC_left) {
  const double disparity = obs_left.x() - obs_right.x();
  if (disparity <= 0.5) throw std::runtime_error("triangulate: unreliable depth");
  const double z = intr.fx * intr.baseline / disparity;
  const double x = (obs_left.x() - intr.cx) * z / intr.fx;
  const double y = (0.5 * (obs_left.y() + obs_right.y()) - intr.cy) * z / intr.fy;
  return T_WC_left * Vec3(x, y, z);
}

// Body-frame poses per camera: the right camera sits baseline to the +x of
// the left in the rectified pair, so T_C1I = [I|(-b,0,0)] * T_C0I.
inline Pose camera_from_body(const Pose& T_C0I, const CameraIntrinsics& intr, int cam) {
  if (cam == 0) return T_C0I;
  return Pose(Quat(1, 0, 0, 0), Vec3(-intr.baseline, 0, 0)) * T_C0I;
}

// E = z - pi(P_C) with P_C = R_cb * R_wb^-1 * (P_w - p_wb) + p_cb.
inline Vec2 camera_residual(const RobotState& state, const Vec3& p_w, const Observation& obs,
                            const Pose& T_CsI, const CameraIntrinsics& intr) {
  const Vec3 p_c = T_CsI * (state.q.conjugate() * (p_w - state.p));
  if (p_c.z() <= 1e-6) throw std::runtime_error("camera_residual: behind camera");
  return obs.pixel - Vec2(intr.fx * p_c.x() / p_c.z() + intr.cx,
                          intr.fy * p_c.y() / p_c.z() + intr.cy);
}

// Jacobians w.r.t. the pose tangent [dp, dtheta] (p += dp, q <- q*exp(dtheta))
// and the landmark position.
inline Vec2 camera_residual_jacobians(const RobotState& state, const Vec3& p_w,
                                      const Observation& obs, const Pose& T_CsI,
                                      const CameraIntrinsics& intr,
                                      Eigen::Matrix<double, 2, 6>* J_pose,
                                      Eigen::Matrix<double, 2, 3>* J_landmark) {
  const Mat3 R_wb = state.q.toRotationMatrix();
  const Vec3 u = R_wb.transpose() * (p_w - state.p);  // body frame
  const Vec3 p_c = T_CsI * u;
  if (p_c.z() <= 1e-6) throw std::runtime_error("camera_residual: behind camera");

  Eigen::Matrix<double, 2, 3> d_pi;
  const double inv_z = 1.0 / p_c.z();
  d_pi << intr.fx * inv_z, 0, -intr.fx * p_c.x() * inv_z * inv_z, 0, intr.fy * inv_z,
      -intr.fy * p_c.y() * inv_z * inv_z;

  const Mat3 R_cb = T_CsI.R();
  if (J_pose) {
    J_pose->block<2, 3>(0, 0) = d_pi * (R_cb * R_wb.transpose());
    J_pose->block<2, 3>(0, 3) = -d_pi * (R_cb * skew(u));
  }
  if (J_landmark) *J_landmark = -d_pi * (R_cb * R_wb.transpose());

  return obs.pixel - Vec2(intr.fx * p_c.x() * inv_z + intr.cx, intr.fy * p_c.y() * inv_z + intr.cy);
}

struct TrackResult {
  std::vector<Observation> observations;  // of landmarks known after this frame
  std::vector<int> new_landmark_ids;
};

// Appends observations of known landmarks and triangulates landmarks seen in
// both cameras that the store does not have yet. Monocular observations of
// unknown landmarks are dropped; stereo pairs too weak to triangulate are
// skipped without error.
inline TrackResult track(const CameraFrame& frame, int keyframe_id, const Pose& T_WC_left,
                         const CameraIntrinsics& intr, LandmarkStore* store) {
  std::map<int, std::pair<const VisualObs*, const VisualObs*>> by_id;
  for (const VisualObs& o : frame.obs) {
    auto& slot = by_id[static_cast<int>(o.id)];
    (o.cam == 0 ? slot.first : slot.second) = &o;
  }

  TrackResult out;
  for (const auto& [id, pair] : by_id) {
    if (!store->has(id) && pair.first && pair.second) {
      Landmark lm;
      lm.id = id;
      try {
        lm.p_w = triangulate(pair.first->px, pair.second->px, intr, T_WC_left);
      } catch (const std::runtime_error&) {
        continue;
      }
      if (!frame.raster.empty() && frame.raster.contains(pair.first->px))
        lm.color = frame.raster.nearest(pair.first->px);
      store->add(lm);
      out.new_landmark_ids.push_back(id);
    }
    if (!store->has(id)) continue;
    for (const VisualObs* o : {pair.first, pair.second})
      if (o)
        out.observations.push_back(
            Observation{o->cam, static_cast<int>(o->id), keyframe_id, o->px});
  }
  return out;
}

}  // namespace fathom
