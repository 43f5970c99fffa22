#pragma once

// Scene presets for the simulator and the dataset generation driver shared by
// the CLI and the test suite. Two presets:
//   tank   two checkerboard walls meeting in a vertical corner; the body
//          cruises toward the corner with gentle yaw/pitch/roll oscillation
//          at constant height (the corner direction stays observable for
//          scan-to-scan sonar odometry).
//   plane  one textured wall viewed head-on with a lateral sweep.
// All effective parameters end up in the returned Config, which is written
// into the dataset so downstream stages can rebuild the world exactly.

#include <cmath>
#include <string>

#include "fathom/dataset.hpp"
#include "fathom/scenes_detail.hpp"

namespace fathom {

struct SceneBundle {
  World world;
  TrajectorySpec traj;
  Config config;  // fully resolved
};

inline Pose nominal_T_IC() {
  Mat3 R;
  // Camera x (right) -> -body y, camera y (down) -> -body z, camera z -> body x.
  R << 0, 0, 1, -1, 0, 0, 0, -1, 0;
  return Pose(Quat(R), Vec3(0.10, 0.0, -0.05));
}

// True camera->sonar extrinsic: a small rotation about a seeded random axis
// plus a fixed lever arm.
inline Pose sampled_T_CSo(std::uint64_t seed, double rot_deg, const Vec3& trans) {
  Rng rng(mix_seed(seed, 17));
  std::normal_distribution<double> n(0.0, 1.0);
  Vec3 axis(n(rng), n(rng), n(rng));
  while (axis.norm() < 1e-9) axis = Vec3(n(rng), n(rng), n(rng));
  return Pose(quat_exp(deg2rad(rot_deg) * axis.normalized()), trans);
}

inline SceneBundle make_scene(const Config& user) {
  Config cfg = user;
  auto dflt = [&cfg](const std::string& k, const std::string& v) {
    if (!cfg.has(k)) cfg.set(k, v);
  };
  dflt("scene", "tank");
  dflt("seed", "1");
  dflt("duration", "60");
  dflt("imu_rate_hz", "200");
  dflt("cam_rate_hz", "10");
  dflt("sonar_rate_hz", "5");
  dflt("imu_sigma_g", "0");
  dflt("imu_sigma_a", "0");
  dflt("imu_bias_g", "0 0 0");
  dflt("imu_bias_a", "0 0 0");
  dflt("cam_fx", "400");
  dflt("cam_fy", "400");
  dflt("cam_cx", "320");
  dflt("cam_cy", "240");
  dflt("cam_width", "640");
  dflt("cam_height", "480");
  dflt("cam_baseline", "0.1");
  dflt("cam_sigma_px", "0");
  dflt("sonar_max_range", "8");
  dflt("sonar_hfov_deg", "90");
  dflt("sonar_vfov_deg", "50");
  dflt("sonar_sigma_r", "0");
  dflt("sonar_sigma_theta", "0");
  dflt("sonar_detect_prob", "1");
  dflt("sonar_grazing_dropout", "0");
  dflt("extrinsic_rot_deg", "5");
  dflt("sim_rasters", "1");

  const auto seed = static_cast<std::uint64_t>(cfg.get_int("seed", 1));
  if (!cfg.has("extrinsic_t_ic")) cfg.set_pose("extrinsic_t_ic", nominal_T_IC());
  if (!cfg.has("extrinsic_t_cso_true"))
    cfg.set_pose("extrinsic_t_cso_true",
                 sampled_T_CSo(seed, cfg.get_double("extrinsic_rot_deg", 5.0),
                               cfg.get_vec3("extrinsic_trans", Vec3(0.10, -0.05, 0.20))));

  SceneBundle out;
  const std::string scene = cfg.get_str("scene", "tank");
  const double duration = cfg.get_double("duration", 60.0);
  if (scene == "tank") {
    detail::build_tank(duration, &out.world, &out.traj, &cfg);
  } else if (scene == "plane") {
    detail::build_plane(duration, &out.world, &out.traj, &cfg);
  } else {
    throw std::runtime_error("scene: unknown preset '" + scene + "'");
  }
  world_to_config(out.world, &cfg);
  out.config = cfg;
  return out;
}

// Generates the full dataset for a scene config and writes it to out_dir.
inline void simulate_dataset(const Config& user, const std::string& out_dir) {
  SceneBundle scene = make_scene(user);
  const Config& cfg = scene.config;
  const Trajectory traj(scene.traj);
  const auto seed = static_cast<std::uint64_t>(cfg.get_int("seed", 1));
  const double duration = cfg.get_double("duration", 60.0);
  const double imu_rate = cfg.get_double("imu_rate_hz", 200.0);
  const double cam_rate = cfg.get_double("cam_rate_hz", 10.0);
  const double sonar_rate = cfg.get_double("sonar_rate_hz", 5.0);
  const bool rasters = cfg.get_int("sim_rasters", 1) != 0;

  ImuNoise noise;
  noise.sigma_g = cfg.get_double("imu_sigma_g", 0.0);
  noise.sigma_a = cfg.get_double("imu_sigma_a", 0.0);
  noise.bias_g = cfg.get_vec3("imu_bias_g");
  noise.bias_a = cfg.get_vec3("imu_bias_a");

  Dataset probe;
  probe.config = cfg;
  const CameraIntrinsics intr = probe.intrinsics();
  const SonarModel sonar = probe.sonar_model();
  const Pose T_IC = cfg.get_pose("extrinsic_t_ic");
  const Pose T_ISo = T_IC * cfg.get_pose("extrinsic_t_cso_true");

  DatasetWriter writer(out_dir, cfg);
  for (const ImuSample& s : synth_imu(traj, noise, imu_rate, mix_seed(seed, 1)))
    writer.add_imu(s);

  const auto n_cam = static_cast<size_t>(std::llround(duration * cam_rate));
  for (size_t i = 0; i < n_cam; ++i) {
    const double t = static_cast<double>(i) / cam_rate;
    const Pose T_WI = traj.sample(t).T_wb;
    CameraFrame frame = synth_stereo(scene.world, T_WI * T_IC, intr, mix_seed(seed, 1000 + i), rasters);
    frame.t = t;
    writer.add_camera(frame);
    writer.add_groundtruth(t, T_WI);
  }

  const auto n_sonar = static_cast<size_t>(std::llround(duration * sonar_rate));
  for (size_t i = 0; i < n_sonar; ++i) {
    const double t = static_cast<double>(i) / sonar_rate;
    const Pose T_WI = traj.sample(t).T_wb;
    SonarScan scan = synth_sonar(scene.world, T_WI * T_ISo, sonar, mix_seed(seed, 500000 + i));
    scan.t = t;
    writer.add_sonar(scan);
  }

  writer.set_landmarks(scene.world.landmarks);
  writer.finalize();
}

}  // namespace fathom
