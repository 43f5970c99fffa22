#include <cstdio>
#include <fstream>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "fathom/calibration.hpp"
#include "fathom/scenes.hpp"

using namespace fathom;

namespace {

Quat random_quat(Rng& rng, double max_angle) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vec3 axis(gauss(rng), gauss(rng), gauss(rng));
  std::uniform_real_distribution<double> unif(0.2 * max_angle, max_angle);
  return quat_exp(unif(rng) * axis.normalized());
}

// Sonar pose looking horizontally at the tank corner (sonar z forward toward
// (1,1,0)/sqrt(2), y down).
Pose corner_view(const Vec3& position) {
  Mat3 R;
  const double s = 1.0 / std::sqrt(2.0);
  R.col(0) = Vec3(s, -s, 0);   // sonar x
  R.col(1) = Vec3(0, 0, -1);   // sonar y (down)
  R.col(2) = Vec3(s, s, 0);    // sonar z (forward)
  return Pose(Quat(R), position);
}

World tank_world() {
  Config user;
  return make_scene(user).world;
}

}  // namespace

TEST_CASE("rigid alignment: recovers random rigid motions exactly") {
  Rng rng(2024);
  std::uniform_real_distribution<double> unif(-2.0, 2.0);
  for (int trial = 0; trial < 30; ++trial) {
    const Pose T(random_quat(rng, 2.5), Vec3(unif(rng), unif(rng), unif(rng)));
    std::vector<Vec3> src, dst;
    for (int i = 0; i < 12; ++i) {
      src.push_back(Vec3(unif(rng), unif(rng), unif(rng)));
      dst.push_back(T * src.back());
    }
    const Pose est = rigid_align(src, dst);
    CHECK(pose_distance(est, T) < 1e-12);
  }
}

TEST_CASE("rigid alignment: planar point sets still give proper rotations") {
  Rng rng(7);
  std::uniform_real_distribution<double> unif(-2.0, 2.0);
  const Pose T(quat_exp(Vec3(0.1, -0.2, 0.8)), Vec3(0.3, 0.1, -0.2));
  std::vector<Vec3> src, dst;
  for (int i = 0; i < 10; ++i) {
    src.push_back(Vec3(unif(rng), unif(rng), 0.0));  // coplanar
    dst.push_back(T * src.back());
  }
  const Pose est = rigid_align(src, dst);
  CHECK(est.R().determinant() == Catch::Approx(1.0).margin(1e-12));
  CHECK(pose_distance(est, T) < 1e-10);

  CHECK(pose_distance(rigid_align(src, src), Pose()) < 1e-12);
  CHECK_THROWS_AS(rigid_align({}, {}), std::invalid_argument);
}

TEST_CASE("sonar odometry: static scans stay at identity") {
  const World world = tank_world();
  const Pose view = corner_view(Vec3(0.5, 0.5, 0));
  SonarModel model;
  std::vector<SonarScan> scans;
  for (int i = 0; i < 5; ++i) scans.push_back(synth_sonar(world, view, model, mix_seed(1, i)));

  SonarFrontendConfig cfg;
  const CoarseOdometryResult odo = coarse_sonar_odometry(scans, cfg);
  REQUIRE(odo.poses.size() == 5);
  for (const Pose& p : odo.poses) CHECK(pose_distance(p, Pose()) < 1e-6);
  CHECK_THROWS_AS(coarse_sonar_odometry({scans[0]}, cfg), std::invalid_argument);
}

TEST_CASE("sonar odometry: recovers a known translation through a corner scene") {
  const World world = tank_world();
  SonarModel model;
  const Vec3 step(0.07, 0.07, 0.0);
  std::vector<Pose> gt;
  std::vector<SonarScan> scans;
  for (int i = 0; i < 10; ++i) {
    gt.push_back(corner_view(Vec3(0.5, 0.5, 0) + i * step));
    scans.push_back(synth_sonar(world, gt.back(), model, mix_seed(2, i)));
  }

  SonarFrontendConfig cfg;
  const CoarseOdometryResult odo = coarse_sonar_odometry(scans, cfg);
  for (size_t i = 0; i < scans.size(); ++i) {
    const Pose want = gt[0].inverse() * gt[i];
    CHECK((odo.poses[i].t - want.t).norm() < 1e-4);
    CHECK(rotation_angle(odo.poses[i].q, want.q) < 1e-5);
  }
}

TEST_CASE("sonar odometry: a single plane leaves in-plane motion degenerate") {
  World world;
  SurfacePatch patch;
  patch.origin = Vec3(-3.0, -3.0, 2.5);
  patch.edge_u = Vec3(6.0, 0.0, 0.0);
  patch.edge_v = Vec3(0.0, 6.0, 0.0);
  world.patches = {patch};
  world.sample_spacing = 0.25;
  world.build();

  SonarModel model;
  std::vector<SonarScan> scans;
  for (int i = 0; i < 5; ++i) {
    const Pose T(Quat(1, 0, 0, 0), Vec3(0.05 * i, 0, 0));
    scans.push_back(synth_sonar(world, T, model, mix_seed(3, i)));
  }
  SonarFrontendConfig cfg;
  const CoarseOdometryResult odo = coarse_sonar_odometry(scans, cfg);
  for (size_t i = 1; i < scans.size(); ++i) CHECK(odo.degenerate[i] == 1);
}

namespace {

PoseStreamPair synthetic_streams(const Pose& X, int n, std::uint64_t seed, double rot_scale,
                                 double sonar_noise = 0.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(-0.3, 0.3);
  PoseStreamPair pairs;
  Pose T_WC;
  for (int i = 0; i < n; ++i) {
    if (i > 0)
      T_WC = T_WC * Pose(random_quat(rng, rot_scale), Vec3(unif(rng), unif(rng), unif(rng)));
    pairs.T_WC.push_back(T_WC);
    Pose T_So = X.inverse() * T_WC * X;
    if (sonar_noise > 0.0) {
      std::normal_distribution<double> gauss(0.0, sonar_noise);
      T_So = T_So * Pose(quat_exp(Vec3(gauss(rng), gauss(rng), gauss(rng))),
                         Vec3(gauss(rng), gauss(rng), gauss(rng)));
    }
    pairs.T_So.push_back(T_So);
  }
  return pairs;
}

}  // namespace

TEST_CASE("hand-eye: recovers the extrinsic from noiseless streams") {
  const Pose X = sampled_T_CSo(3, 10.0, Vec3(0.10, -0.05, 0.20));
  const PoseStreamPair pairs = synthetic_streams(X, 12, 99, 0.4);
  const HandEyeResult res = coarse_calibrate(pairs);
  CHECK(res.excitation > 0.1);
  CHECK(pose_distance(res.init, X) < 1e-6);
  CHECK(pose_distance(res.calibrated, X) < 1e-6);
  CHECK(res.consistency_refined < 1e-9);
}

TEST_CASE("hand-eye: identical streams give the identity") {
  const PoseStreamPair self = synthetic_streams(Pose(), 10, 5, 0.4);
  const HandEyeResult res = coarse_calibrate(self);
  CHECK(pose_distance(res.calibrated, Pose()) < 1e-9);
}

TEST_CASE("hand-eye: pure translation is degenerate motion") {
  PoseStreamPair pairs;
  const Pose X = sampled_T_CSo(4, 8.0, Vec3(0.1, 0.0, 0.2));
  for (int i = 0; i < 10; ++i) {
    const Pose T_WC(Quat(1, 0, 0, 0), Vec3(0.1 * i, 0.05 * i, 0));
    pairs.T_WC.push_back(T_WC);
    pairs.T_So.push_back(X.inverse() * T_WC * X);
  }
  CHECK_THROWS_WITH(coarse_calibrate(pairs),
                    Catch::Matchers::ContainsSubstring("degenerate motion"));
  PoseStreamPair tiny;
  tiny.T_WC = {Pose(), Pose(), Pose()};
  tiny.T_So = tiny.T_WC;
  CHECK_THROWS_AS(coarse_calibrate(tiny), std::invalid_argument);
}

TEST_CASE("hand-eye: refinement never worsens the consistency metric") {
  const Pose X = sampled_T_CSo(6, 12.0, Vec3(0.08, -0.02, 0.15));
  for (int trial = 0; trial < 5; ++trial) {
    const PoseStreamPair pairs = synthetic_streams(X, 15, mix_seed(7, trial), 0.35, 0.01);
    const HandEyeResult res = coarse_calibrate(pairs);
    CHECK(res.consistency_refined <= res.consistency_init + 1e-12);
    CHECK(pose_distance(res.calibrated, X) < 0.1);
  }
}

TEST_CASE("refinement: exact overlap keeps the coarse extrinsic") {
  Config user;
  const SceneBundle scene = make_scene(user);
  const Trajectory traj(scene.traj);
  const Pose T_CSo = scene.config.get_pose("extrinsic_t_cso_true");
  const Pose T_WC = traj.sample(2.0).T_wb * nominal_T_IC();
  SonarModel model;
  const SonarScan scan = synth_sonar(scene.world, T_WC * T_CSo, model, 11);
  REQUIRE(scan.points.size() > 50);

  std::vector<Vec3> landmarks;
  for (const auto& s : scene.world.samples) landmarks.push_back(s.p);

  const RefineResult res = refine_calibrate(T_CSo, landmarks, scan, T_WC, 0.2);
  CHECK(pose_distance(res.T_P2P, Pose()) < 1e-9);
  CHECK(pose_distance(res.refined, T_CSo) < 1e-9);
  CHECK(res.mean_dist_after <= res.mean_dist_before + 1e-12);
  CHECK(res.correspondences >= static_cast<int>(scan.points.size()) / 2);
}

TEST_CASE("refinement: pulls a perturbed extrinsic back to truth") {
  Config user;
  user.set("seed", "9");
  const SceneBundle scene = make_scene(user);
  const Trajectory traj(scene.traj);
  const Pose T_CSo = scene.config.get_pose("extrinsic_t_cso_true");
  const Pose T_WC = traj.sample(4.0).T_wb * nominal_T_IC();
  SonarModel model;
  const SonarScan scan = synth_sonar(scene.world, T_WC * T_CSo, model, 12);

  std::vector<Vec3> landmarks;
  for (const auto& s : scene.world.samples) landmarks.push_back(s.p);

  Rng rng(55);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vec3 axis(gauss(rng), gauss(rng), gauss(rng));
  const Pose coarse =
      T_CSo * Pose(quat_exp(deg2rad(2.0) * axis.normalized()), Vec3(0.012, -0.01, 0.012));

  const RefineResult res = refine_calibrate(coarse, landmarks, scan, T_WC, 0.2);
  CHECK(rotation_angle(res.refined.q, T_CSo.q) < deg2rad(0.2));
  CHECK((res.refined.t - T_CSo.t).norm() < 0.005);
  CHECK(res.mean_dist_after <= res.mean_dist_before + 1e-12);

  // composing the refinement reproduces the aligned cloud exactly
  for (const Vec3& p : scan.points) {
    const Vec3 via_refined = T_WC * (res.refined * p);
    const Vec3 via_p2p = res.T_P2P * (T_WC * (coarse * p));
    CHECK((via_refined - via_p2p).norm() < 1e-9);
  }
}

TEST_CASE("refinement: no points near landmarks is an error") {
  const Pose far_off(Quat(1, 0, 0, 0), Vec3(50, 50, 50));
  SonarScan scan;
  scan.points = {Vec3(0, 0, 2), Vec3(0.5, 0, 2), Vec3(0, 0.5, 2), Vec3(0.5, 0.5, 2)};
  std::vector<Vec3> landmarks = {Vec3(0, 0, 2), Vec3(1, 0, 2), Vec3(0, 1, 2)};
  CHECK_THROWS_WITH(refine_calibrate(far_off, landmarks, scan, Pose(), 0.2),
                    Catch::Matchers::ContainsSubstring("insufficient overlap"));
}

TEST_CASE("overlay: projects frustum points and drops the rest") {
  CameraIntrinsics intr;
  SonarScan scan;
  scan.points = {Vec3(0, 0, 3), Vec3(0, 0, -3), Vec3(50, 0, 1)};
  const auto pts = backproject_overlay(scan, Pose(), intr);
  REQUIRE(pts.size() == 1);
  CHECK((pts[0].px - Vec2(intr.cx, intr.cy)).norm() < 1e-12);
  CHECK(pts[0].range == Catch::Approx(3.0));
}

TEST_CASE("overlay: rays through overlay pixels hit the sonar's surface points") {
  Config user;
  user.set("seed", "10");
  const SceneBundle scene = make_scene(user);
  const Trajectory traj(scene.traj);
  const Pose T_CSo = scene.config.get_pose("extrinsic_t_cso_true");
  const Pose T_WC = traj.sample(3.0).T_wb * nominal_T_IC();
  SonarModel model;
  const SonarScan scan = synth_sonar(scene.world, T_WC * T_CSo, model, 13);
  CameraIntrinsics intr;

  int in_view = 0;
  int exact = 0;
  const Mat3 R = T_WC.R();
  for (const Vec3& p : scan.points) {
    const Vec3 p_c = T_CSo * p;
    const auto px = project_pinhole(intr, p_c);
    if (!px || px->x() < 0 || px->y() < 0 || px->x() > intr.width - 1 ||
        px->y() > intr.height - 1)
      continue;
    ++in_view;
    const Vec3 w = T_WC * p_c;
    const Vec3 dir = (R * Vec3((px->x() - intr.cx) / intr.fx, (px->y() - intr.cy) / intr.fy, 1.0))
                         .normalized();
    const auto hit = scene.world.raycast(T_WC.t, dir, 1e6);
    REQUIRE(hit.has_value());
    const Vec3 hit_p = T_WC.t + hit->t * dir;
    if ((hit_p - w).norm() < 1e-6) {
      ++exact;
    } else {
      // the sonar point sits behind a nearer surface from the camera's
      // vantage (the walls overhang past their corner); the ray must stop
      // strictly short of it, never sail past
      CHECK(hit->t < (w - T_WC.t).norm() - 1e-6);
    }
  }
  CHECK(exact > 30);

  // the overlay itself reports exactly the in-frustum pixels
  const auto pts = backproject_overlay(scan, T_CSo, intr);
  CHECK(static_cast<int>(pts.size()) == in_view);
}

TEST_CASE("overlay: CSV round trip") {
  std::vector<OverlayPoint> pts;
  for (int i = 0; i < 3; ++i) pts.push_back(OverlayPoint{Vec2(100.25 + i, 200.5 * i), 1.0 + 0.1 * i});
  const std::string path = "/tmp/fathom_overlay.csv";
  overlay_csv(path, pts);
  std::ifstream f(path);
  REQUIRE(f.good());
  std::string line;
  REQUIRE(std::getline(f, line));
  CHECK(line == "u,v,range");
  for (int i = 0; i < 3; ++i) {
    REQUIRE(std::getline(f, line));
    double u, v, r;
    REQUIRE(std::sscanf(line.c_str(), "%lf,%lf,%lf", &u, &v, &r) == 3);
    CHECK(u == pts[i].px.x());
    CHECK(v == pts[i].px.y());
    CHECK(r == pts[i].range);
  }
  std::remove(path.c_str());
}

TEST_CASE("calibration report: save/load round trip") {
  CalibResult r;
  r.coarse = Pose(quat_exp(Vec3(0.1, -0.2, 0.3)), Vec3(0.11, -0.05, 0.21));
  r.refined = Pose(quat_exp(Vec3(0.09, -0.21, 0.31)), Vec3(0.1, -0.049, 0.2));
  r.has_refined = true;
  r.excitation = 0.2345;
  r.consistency_init = 0.01;
  r.consistency_refined = 0.004;
  r.refine_correspondences = 123;
  r.refine_mean_dist_before = 0.08;
  r.refine_mean_dist_after = 0.02;

  const std::string path = "/tmp/fathom_calib.txt";
  save_calib_report(path, r);
  const CalibResult back = load_calib_report(path);
  CHECK(pose_distance(back.coarse, r.coarse) < 1e-15);
  CHECK(back.has_refined);
  CHECK(pose_distance(back.refined, r.refined) < 1e-15);
  CHECK(back.excitation == r.excitation);
  CHECK(back.consistency_init == r.consistency_init);
  CHECK(back.consistency_refined == r.consistency_refined);
  CHECK(back.refine_correspondences == r.refine_correspondences);
  CHECK(back.refine_mean_dist_before == r.refine_mean_dist_before);
  CHECK(back.refine_mean_dist_after == r.refine_mean_dist_after);
  std::remove(path.c_str());

  CalibResult coarse_only;
  coarse_only.coarse = r.coarse;
  save_calib_report(path, coarse_only);
  CHECK_FALSE(load_calib_report(path).has_refined);
  std::remove(path.c_str());
}
