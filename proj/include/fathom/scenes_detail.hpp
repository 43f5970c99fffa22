#pragma once

#include <cmath>

#include "fathom/dataset.hpp"
#include "fathom/trajectory.hpp"
#include "fathom/world.hpp"

namespace fathom::detail {

inline Quat yaw_pitch_roll(double yaw, double pitch, double roll) {
  return quat_canonical(Quat(Eigen::AngleAxisd(yaw, Vec3::UnitZ()) *
                             Eigen::AngleAxisd(pitch, Vec3::UnitY()) *
                             Eigen::AngleAxisd(roll, Vec3::UnitX())));
}

// Two walls, x = 4 and y = 4, meeting in a vertical corner. The body holds
// constant height and weaves toward the corner at ~45 deg heading.
inline void build_tank(double duration, World* world, TrajectorySpec* traj, Config* cfg) {
  auto dflt = [cfg](const std::string& k, const std::string& v) {
    if (!cfg->has(k)) cfg->set(k, v);
  };
  dflt("world_sample_spacing", "0.25");
  dflt("world_landmark_stride", "2");
  dflt("traj_sway_m", "0.8");
  dflt("traj_yaw_deg", "8");
  dflt("traj_pitch_deg", "2.5");
  dflt("traj_roll_deg", "1.5");

  world->patches.clear();
  SurfacePatch wall_a;
  wall_a.origin = Vec3(4.0, -3.0, -1.5);
  wall_a.edge_u = Vec3(0.0, 8.0, 0.0);
  wall_a.edge_v = Vec3(0.0, 0.0, 3.0);
  wall_a.texture = TextureKind::kChecker;
  SurfacePatch wall_b;
  wall_b.origin = Vec3(-3.0, 4.0, -1.5);
  wall_b.edge_u = Vec3(8.0, 0.0, 0.0);
  wall_b.edge_v = Vec3(0.0, 0.0, 3.0);
  wall_b.texture = TextureKind::kChecker;
  wall_b.color_a = Rgb8(70, 140, 220);
  wall_b.color_b = Rgb8(240, 230, 180);
  world->patches = {wall_a, wall_b};
  world->sample_spacing = cfg->get_double("world_sample_spacing", 0.25);
  world->landmark_stride = static_cast<size_t>(cfg->get_int("world_landmark_stride", 2));
  world->build();

  traj->times.clear();
  traj->poses.clear();
  traj->duration = duration;
  const double sway = cfg->get_double("traj_sway_m", 0.8);
  const double yaw_amp = deg2rad(cfg->get_double("traj_yaw_deg", 8.0));
  const double pitch_amp = deg2rad(cfg->get_double("traj_pitch_deg", 2.5));
  const double roll_amp = deg2rad(cfg->get_double("traj_roll_deg", 1.5));
  const double dt = 0.5;
  const auto n = static_cast<size_t>(std::llround(duration / dt));
  for (size_t i = 0; i <= n; ++i) {
    const double t = std::min(static_cast<double>(i) * dt, duration);
    const Vec3 p(0.5 + sway * std::sin(2.0 * kPi * t / 17.0),
                 0.5 + sway * std::sin(2.0 * kPi * t / 23.0 + 0.7), 0.0);
    const double yaw = deg2rad(45.0) + yaw_amp * std::sin(2.0 * kPi * t / 13.0);
    const double pitch = pitch_amp * std::sin(2.0 * kPi * t / 11.0);
    const double roll = roll_amp * std::sin(2.0 * kPi * t / 19.0);
    traj->times.push_back(t);
    traj->poses.push_back(Pose(yaw_pitch_roll(yaw, pitch, roll), p));
  }
}

// One wall at x = 3.2 viewed head-on; lateral sweep with mild attitude wiggle.
inline void build_plane(double duration, World* world, TrajectorySpec* traj, Config* cfg) {
  auto dflt = [cfg](const std::string& k, const std::string& v) {
    if (!cfg->has(k)) cfg->set(k, v);
  };
  dflt("world_sample_spacing", "0.25");
  dflt("world_landmark_stride", "2");

  world->patches.clear();
  SurfacePatch wall;
  wall.origin = Vec3(3.2, -3.0, -1.5);
  wall.edge_u = Vec3(0.0, 6.0, 0.0);
  wall.edge_v = Vec3(0.0, 0.0, 3.0);
  wall.texture = TextureKind::kChecker;
  world->patches = {wall};
  world->sample_spacing = cfg->get_double("world_sample_spacing", 0.25);
  world->landmark_stride = static_cast<size_t>(cfg->get_int("world_landmark_stride", 2));
  world->build();

  traj->times.clear();
  traj->poses.clear();
  traj->duration = duration;
  const double dt = 0.5;
  const auto n = static_cast<size_t>(std::llround(duration / dt));
  for (size_t i = 0; i <= n; ++i) {
    const double t = std::min(static_cast<double>(i) * dt, duration);
    const Vec3 p(0.25 * std::sin(2.0 * kPi * t / 27.0), 0.9 * std::sin(2.0 * kPi * t / 19.0), 0.0);
    const double yaw = deg2rad(5.0) * std::sin(2.0 * kPi * t / 13.0);
    const double pitch = deg2rad(2.0) * std::sin(2.0 * kPi * t / 11.0);
    traj->times.push_back(t);
    traj->poses.push_back(Pose(yaw_pitch_roll(yaw, pitch, 0.0), p));
  }
}

}  // namespace fathom::detail
