#include <cmath>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "fathom/pipeline.hpp"
#include "fathom/scenes.hpp"
#include "fathom/solver.hpp"

using namespace fathom;

namespace {

// A preintegration whose measurement exactly matches the two states, so the
// inertial residual vanishes at ground truth.
PreintegratedImu consistent_preint(const RobotState& s0, const RobotState& s1, double dt,
                                   double cov_scale = 1e-6) {
  PreintegratedImu pre;
  pre.dt = dt;
  const Quat q0c = s0.q.conjugate();
  pre.alpha = q0c * (s1.p - s0.p - s0.v * dt + 0.5 * gravity_w() * dt * dt);
  pre.beta = q0c * (s1.v - s0.v + gravity_w() * dt);
  pre.dq = quat_canonical(q0c * s1.q);
  pre.cov = Mat9::Identity() * cov_scale;
  return pre;
}

struct TestWindow {
  SlidingWindow window;
  LandmarkStore store;
  std::vector<RobotState> gt;
  Pose T_C0I;
  Pose T_ISo;
  CameraIntrinsics intr;
};

TestWindow make_window(const std::vector<double>& times, std::uint64_t seed, double cam_sigma,
                       bool with_camera = true, bool with_sonar = true) {
  Config user;
  user.set("seed", std::to_string(seed));
  const SceneBundle scene = make_scene(user);
  const Trajectory traj(scene.traj);

  TestWindow tw;
  tw.intr.sigma_px = cam_sigma;
  const Pose T_IC = nominal_T_IC();
  tw.T_C0I = T_IC.inverse();
  tw.T_ISo = T_IC * scene.config.get_pose("extrinsic_t_cso_true");

  SonarModel model;
  SonarFrontendConfig fcfg;
  std::vector<std::vector<SurfaceFeature>> feats;
  std::vector<Pose> T_WSo;
  for (std::size_t k = 0; k < times.size(); ++k) {
    const TrajectorySample s = traj.sample(times[k]);
    RobotState st;
    st.q = s.T_wb.q;
    st.p = s.T_wb.t;
    st.v = s.v_w;
    tw.gt.push_back(st);

    WindowKeyframe kf;
    kf.id = static_cast<int>(k);
    kf.t = times[k];
    kf.state = st;
    if (with_camera) {
      const Pose T_WC = s.T_wb * T_IC;
      const CameraFrame fr = synth_stereo(scene.world, T_WC, tw.intr, mix_seed(seed, k), false);
      const TrackResult tr = track(fr, kf.id, T_WC, tw.intr, &tw.store);
      kf.observations = tr.observations;
    }
    if (with_sonar) {
      const Pose T = s.T_wb * tw.T_ISo;
      const SonarScan scan = synth_sonar(scene.world, T, model, mix_seed(seed, 100 + k));
      kf.features = extract_features(scan, fcfg);
      for (std::size_t j = 0; j < k; ++j) {
        const Pose prior = T_WSo[j].inverse() * T;
        auto mm = associate(kf.features, feats[j], prior, fcfg, static_cast<int>(j));
        if (mm.size() >= 3) {
          mm = reject_outliers(mm, prior, fcfg, mix_seed(seed, 200 + 10 * k + j));
          kf.matches.insert(kf.matches.end(), mm.begin(), mm.end());
        }
      }
      feats.push_back(kf.features);
      T_WSo.push_back(T);
    }
    tw.window.frames.push_back(std::move(kf));
  }
  for (std::size_t k = 0; k + 1 < times.size(); ++k)
    tw.window.frames[k].to_next =
        consistent_preint(tw.gt[k], tw.gt[k + 1], times[k + 1] - times[k]);
  return tw;
}

RobotState perturbed(const RobotState& s, Rng& rng, double dp, double dtheta, double dv) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  const Vec3 u = Vec3(gauss(rng), gauss(rng), gauss(rng)).normalized();
  const Vec3 w = Vec3(gauss(rng), gauss(rng), gauss(rng)).normalized();
  RobotState out = s;
  out.p += dp * u;
  out.q = quat_canonical(s.q * quat_exp(dtheta * w));
  out.v += dv * Vec3(gauss(rng), gauss(rng), gauss(rng)).normalized();
  return out;
}

double window_ate(const std::vector<RobotState>& est, const std::vector<RobotState>& gt) {
  double sum = 0.0;
  for (std::size_t k = 0; k < est.size(); ++k) sum += (est[k].p - gt[k].p).squaredNorm();
  return std::sqrt(sum / static_cast<double>(est.size()));
}

int count_kind(const Problem& pb, ResidualKind kind) {
  int n = 0;
  for (const ResidualBlock& b : pb.blocks)
    if (b.kind == kind) ++n;
  return n;
}

}  // namespace

TEST_CASE("problem assembly: a lone keyframe has no inertial blocks") {
  const TestWindow tw = make_window({2.0}, 1, 0.0);
  const Problem pb =
      build_problem(tw.window, tw.store, tw.T_C0I, tw.T_ISo, tw.intr, SolverConfig{});
  CHECK(count_kind(pb, ResidualKind::kImu) == 0);
  CHECK(count_kind(pb, ResidualKind::kSonar) == 0);
  CHECK(count_kind(pb, ResidualKind::kCamera) ==
        static_cast<int>(tw.window.frames[0].observations.size()));
  CHECK(pb.landmark_ids.size() == tw.store.size());

  SlidingWindow empty;
  LandmarkStore store;
  CHECK_THROWS_AS(build_problem(empty, store, Pose(), Pose(), CameraIntrinsics{}, SolverConfig{}),
                  std::invalid_argument);
}

TEST_CASE("problem assembly: block counts follow the window contents") {
  LandmarkStore store;
  for (int id = 0; id < 100; ++id) {
    Landmark lm;
    lm.id = id;
    lm.p_w = Vec3(0.1 * id, 0.2, 3.0);
    store.add(lm);
  }
  SlidingWindow window;
  RobotState st;
  for (int k = 0; k < 5; ++k) {
    WindowKeyframe kf;
    kf.id = k;
    kf.t = 0.4 * k;
    kf.state = st;
    for (int id = 0; id < 100; ++id) {
      for (int cam = 0; cam < 2; ++cam) {
        Observation o;
        o.cam = cam;
        o.landmark_id = id;
        o.keyframe_id = k;
        o.pixel = Vec2(320, 240);
        kf.observations.push_back(o);
      }
    }
    for (int j = 0; j < 50; ++j) {
      FeatureMatch m;
      m.keyframe_id = k > 0 ? k - 1 : 1;
      m.p_i = Vec3(0, 0, 2);
      m.p_k = Vec3(0, 0, 2);
      kf.matches.push_back(m);
    }
    window.frames.push_back(std::move(kf));
  }
  for (int k = 0; k < 4; ++k)
    window.frames[k].to_next = consistent_preint(st, st, 0.4);

  const Problem pb =
      build_problem(window, store, Pose(), Pose(), CameraIntrinsics{}, SolverConfig{});
  CHECK(count_kind(pb, ResidualKind::kImu) == 4);
  CHECK(count_kind(pb, ResidualKind::kCamera) == 1000);
  CHECK(count_kind(pb, ResidualKind::kSonar) == 250);
}

TEST_CASE("joint cost: zero at ground truth on noiseless data") {
  const TestWindow tw = make_window({2.0, 2.4, 2.8, 3.2, 3.6}, 2, 0.0);
  const Problem pb =
      build_problem(tw.window, tw.store, tw.T_C0I, tw.T_ISo, tw.intr, SolverConfig{});
  REQUIRE(count_kind(pb, ResidualKind::kImu) == 4);
  REQUIRE(count_kind(pb, ResidualKind::kCamera) > 100);
  REQUIRE(count_kind(pb, ResidualKind::kSonar) > 30);
  const auto cb = detail::evaluate_cost(pb, pb.states, pb.landmark_positions);
  CHECK(cb.total < 1e-12);
}

TEST_CASE("solve: converges immediately from ground truth") {
  const TestWindow tw = make_window({2.0, 2.4, 2.8, 3.2, 3.6}, 2, 0.0);
  Problem pb = build_problem(tw.window, tw.store, tw.T_C0I, tw.T_ISo, tw.intr, SolverConfig{});
  const SolveReport rep = solve(&pb, SolverConfig{});
  CHECK(rep.converged);
  CHECK(rep.iterations <= 2);
  CHECK(rep.final_cost < 1e-12);
  CHECK(rep.final_cost <= rep.initial_cost);
}

TEST_CASE("solve: recovers perturbed keyframes on the tank scene") {
  const TestWindow tw = make_window({2.0, 2.4, 2.8, 3.2, 3.6}, 3, 0.0);
  Problem pb = build_problem(tw.window, tw.store, tw.T_C0I, tw.T_ISo, tw.intr, SolverConfig{});
  Rng rng(77);
  for (std::size_t k = 1; k < pb.states.size(); ++k)
    pb.states[k] = perturbed(pb.states[k], rng, 0.05, deg2rad(2.0), 0.02);

  const SolveReport rep = solve(&pb, SolverConfig{});
  CHECK(rep.converged);
  CHECK(rep.final_cost <= rep.initial_cost);
  for (std::size_t k = 0; k < pb.states.size(); ++k) {
    CHECK((pb.states[k].p - tw.gt[k].p).norm() < 1e-5);
    CHECK(rotation_angle(pb.states[k].q, tw.gt[k].q) < 1e-5);
  }
}

TEST_CASE("solve: sonar and inertial terms alone recover the window") {
  const TestWindow tw = make_window({2.0, 2.4, 2.8, 3.2, 3.6}, 4, 0.0, false, true);
  SolverConfig cfg;
  cfg.use_camera = false;
  Problem pb = build_problem(tw.window, tw.store, tw.T_C0I, tw.T_ISo, tw.intr, cfg);
  REQUIRE(count_kind(pb, ResidualKind::kCamera) == 0);
  REQUIRE(count_kind(pb, ResidualKind::kSonar) > 30);
  Rng rng(78);
  for (std::size_t k = 1; k < pb.states.size(); ++k)
    pb.states[k] = perturbed(pb.states[k], rng, 0.02, deg2rad(1.0), 0.01);

  const SolveReport rep = solve(&pb, cfg);
  CHECK(rep.converged);
  for (std::size_t k = 0; k < pb.states.size(); ++k) {
    CHECK((pb.states[k].p - tw.gt[k].p).norm() < 1e-4);
    CHECK(rotation_angle(pb.states[k].q, tw.gt[k].q) < 1e-4);
  }
}

TEST_CASE("solve: rejects invalid information and non-finite residuals") {
  Problem pb;
  pb.states.resize(2);
  pb.states[1].p = Vec3(0.1, 0, 0);

  ResidualBlock b;
  b.kind = ResidualKind::kSonar;
  b.state_a = 0;
  b.state_b = 1;
  b.p_k = Vec3(0, 0, 2);
  b.p_i = Vec3(0, 0, 2);
  b.info = -Mat3::Identity();
  pb.blocks.push_back(b);
  CHECK_THROWS_WITH(solve(&pb, SolverConfig{}),
                    Catch::Matchers::ContainsSubstring("positive definite"));

  pb.blocks[0].info = Mat3::Identity();
  pb.blocks[0].p_k = Vec3(std::nan(""), 0, 2);
  CHECK_THROWS_WITH(solve(&pb, SolverConfig{}),
                    Catch::Matchers::ContainsSubstring("non-finite residual in block 0 (sonar)"));
}

TEST_CASE("solve: anchored gauge makes the optimum independent of the initial frame") {
  const TestWindow tw = make_window({2.0, 2.4, 2.8, 3.2}, 5, 0.0);
  Problem a = build_problem(tw.window, tw.store, tw.T_C0I, tw.T_ISo, tw.intr, SolverConfig{});
  Rng rng(79);
  for (std::size_t k = 1; k < a.states.size(); ++k)
    a.states[k] = perturbed(a.states[k], rng, 0.03, deg2rad(1.0), 0.01);

  Problem b = a;
  const Pose G(quat_exp(Vec3(0.03, -0.02, 0.04)), Vec3(0.1, -0.08, 0.05));
  for (std::size_t k = 1; k < b.states.size(); ++k) {
    RobotState& s = b.states[k];
    s.p = G * s.p;
    s.q = quat_canonical(G.q * s.q);
    s.v = G.q * s.v;
  }
  for (Vec3& lm : b.landmark_positions) lm = G * lm;

  SolverConfig cfg;
  cfg.max_iterations = 200;
  const SolveReport ra = solve(&a, cfg);
  const SolveReport rb = solve(&b, cfg);
  REQUIRE(ra.converged);
  REQUIRE(rb.converged);
  for (std::size_t k = 0; k + 1 < a.states.size(); ++k) {
    const Pose rel_a = Pose(a.states[k].q, a.states[k].p).inverse() *
                       Pose(a.states[k + 1].q, a.states[k + 1].p);
    const Pose rel_b = Pose(b.states[k].q, b.states[k].p).inverse() *
                       Pose(b.states[k + 1].q, b.states[k + 1].p);
    CHECK(pose_distance(rel_a, rel_b) < 1e-9);
  }
}

TEST_CASE("solve: sonar terms tighten a noisy-camera window") {
  // noiseless: adding sonar never hurts
  {
    const TestWindow tw = make_window({2.0, 2.4, 2.8, 3.2, 3.6}, 6, 0.0);
    SolverConfig no_sonar;
    no_sonar.use_sonar = false;
    Problem pa = build_problem(tw.window, tw.store, tw.T_C0I, tw.T_ISo, tw.intr, no_sonar);
    Problem pb =
        build_problem(tw.window, tw.store, tw.T_C0I, tw.T_ISo, tw.intr, SolverConfig{});
    solve(&pa, no_sonar);
    solve(&pb, SolverConfig{});
    CHECK(window_ate(pb.states, tw.gt) <= window_ate(pa.states, tw.gt) + 1e-12);
  }
  // 1 px camera noise: the exact sonar ranges strictly reduce the error.
  // Soft inertial terms, so the camera noise actually displaces the states.
  {
    TestWindow tw = make_window({2.0, 2.4, 2.8, 3.2, 3.6}, 7, 1.0);
    for (std::size_t k = 0; k + 1 < tw.gt.size(); ++k)
      tw.window.frames[k].to_next = consistent_preint(tw.gt[k], tw.gt[k + 1], 0.4, 1e-2);
    SolverConfig cfg;
    cfg.sigma_px = 1.0;
    SolverConfig no_sonar = cfg;
    no_sonar.use_sonar = false;
    Problem pa = build_problem(tw.window, tw.store, tw.T_C0I, tw.T_ISo, tw.intr, no_sonar);
    Problem pb = build_problem(tw.window, tw.store, tw.T_C0I, tw.T_ISo, tw.intr, cfg);
    solve(&pa, no_sonar);
    solve(&pb, cfg);
    const double ate_vis = window_ate(pa.states, tw.gt);
    const double ate_full = window_ate(pb.states, tw.gt);
    CHECK(ate_full < ate_vis);
  }
}

TEST_CASE("marginalization: below capacity leaves the window untouched") {
  TestWindow tw = make_window({2.0, 2.4, 2.8}, 8, 0.0);
  tw.window.capacity = 10;
  CHECK(marginalize_or_drop(&tw.window).empty());
  CHECK(tw.window.frames.size() == 3);
}

TEST_CASE("marginalization: removes the oldest non-anchor frame") {
  LandmarkStore store;
  SlidingWindow window;
  window.capacity = 2;
  RobotState st;
  for (int k = 0; k < 3; ++k) {
    WindowKeyframe kf;
    kf.id = k;
    kf.t = 0.5 * k;
    kf.state = st;
    Observation o;
    o.cam = 0;
    o.keyframe_id = k;
    o.pixel = Vec2(320, 240);
    o.landmark_id = (k == 1) ? 77 : 5;  // 77 is seen only by the frame that goes
    kf.observations.push_back(o);
    if (k == 2) {
      o.landmark_id = 5;
      kf.observations.push_back(o);
      FeatureMatch m;
      m.keyframe_id = 1;  // dies with its keyframe
      kf.matches.push_back(m);
      FeatureMatch m0;
      m0.keyframe_id = 0;
      kf.matches.push_back(m0);
    }
    window.frames.push_back(std::move(kf));
  }
  window.frames[0].to_next = consistent_preint(st, st, 0.5);
  window.frames[1].to_next = consistent_preint(st, st, 0.5);

  const auto orphaned = marginalize_or_drop(&window);
  REQUIRE(window.frames.size() == 2);
  CHECK(window.frames[0].id == 0);
  CHECK(window.frames[1].id == 2);
  REQUIRE(orphaned.size() == 1);
  CHECK(orphaned[0] == 77);
  REQUIRE(window.frames[1].matches.size() == 1);
  CHECK(window.frames[1].matches[0].keyframe_id == 0);
}

TEST_CASE("marginalization: merged preintegration matches the concatenated samples") {
  Config user;
  user.set("seed", "4");
  const SceneBundle scene = make_scene(user);
  const Trajectory traj(scene.traj);
  const auto stream = synth_imu(traj, ImuNoise{}, 200.0, 9);

  auto slice = [&](double t0, double t1) {
    std::vector<ImuSample> out;
    for (const ImuSample& s : stream)
      if (s.t >= t0 - 1e-9 && s.t <= t1 + 1e-9) out.push_back(s);
    return out;
  };

  SlidingWindow window;
  window.capacity = 2;
  for (int k = 0; k < 3; ++k) {
    WindowKeyframe kf;
    kf.id = k;
    window.frames.push_back(std::move(kf));
  }
  window.frames[0].to_next = preintegrate(slice(1.0, 1.5), Vec3::Zero(), Vec3::Zero(), 1e-4, 1e-3);
  window.frames[1].to_next = preintegrate(slice(1.5, 2.2), Vec3::Zero(), Vec3::Zero(), 1e-4, 1e-3);

  marginalize_or_drop(&window);
  REQUIRE(window.frames.size() == 2);
  REQUIRE(window.frames[0].to_next.has_value());

  const PreintegratedImu direct =
      preintegrate(slice(1.0, 2.2), Vec3::Zero(), Vec3::Zero(), 1e-4, 1e-3);
  const PreintegratedImu& merged = *window.frames[0].to_next;
  CHECK(merged.dt == Catch::Approx(direct.dt).margin(1e-12));
  CHECK((merged.alpha - direct.alpha).norm() < 1e-9);
  CHECK((merged.beta - direct.beta).norm() < 1e-9);
  CHECK(rotation_angle(merged.dq, direct.dq) < 1e-9);
  CHECK((merged.cov - direct.cov).cwiseAbs().maxCoeff() < 1e-9);
}

namespace {

struct StreamedRun {
  Pipeline pipeline;
  double ate = 0.0;
  int keyframes = 0;
};

// Drives a pipeline across a scene at camera rate, sonar every other frame.
StreamedRun run_scene(const SceneBundle& scene, double duration, double drop_camera_after,
                      std::uint64_t seed) {
  const Trajectory traj(scene.traj);
  const auto stream = synth_imu(traj, ImuNoise{}, 200.0, seed);
  const Pose T_IC = nominal_T_IC();
  const Pose T_ISo = T_IC * scene.config.get_pose("extrinsic_t_cso_true");
  CameraIntrinsics intr;
  SonarModel model;

  PipelineConfig pcfg;
  pcfg.solver.sigma_px = 1.0;
  pcfg.solver.sigma_so = 0.05;
  pcfg.imu_sigma_g = 1e-4;
  pcfg.imu_sigma_a = 1e-3;

  RobotState init;
  const TrajectorySample s0 = traj.sample(0.0);
  init.q = s0.T_wb.q;
  init.p = s0.T_wb.t;
  init.v = s0.v_w;

  StreamedRun run{Pipeline(T_IC.inverse(), T_ISo, intr, pcfg, init), 0.0, 0};
  std::size_t imu_pos = 0;
  double sum = 0.0;
  int count = 0;
  const int frames = static_cast<int>(std::llround(duration * 10.0));
  for (int f = 0; f <= frames; ++f) {
    const double t = 0.1 * f;
    FrameInput in;
    in.t = t;
    while (imu_pos < stream.size() && stream[imu_pos].t <= t + 1e-9)
      in.imu.push_back(stream[imu_pos++]);
    const TrajectorySample s = traj.sample(t);
    if (drop_camera_after <= 0.0 || t < drop_camera_after)
      in.camera = synth_stereo(scene.world, s.T_wb * T_IC, intr, mix_seed(seed, 1000 + f), false);
    if (f % 2 == 0)
      in.sonar = synth_sonar(scene.world, s.T_wb * T_ISo, model, mix_seed(seed, 2000 + f));

    const FrameResult res = run.pipeline.process_frame(in);
    if (res.keyframe) ++run.keyframes;
    sum += (res.state.p - s.T_wb.t).squaredNorm();
    ++count;
  }
  run.ate = std::sqrt(sum / std::max(count, 1));
  return run;
}

}  // namespace

TEST_CASE("pipeline: a stationary sequence keeps a single keyframe") {
  Config user;
  const SceneBundle scene = make_scene(user);

  TrajectorySpec spec;
  spec.duration = 10.0;
  const Pose hold(detail::yaw_pitch_roll(deg2rad(45.0), 0.0, 0.0), Vec3(0.5, 0.5, 0.0));
  for (int i = 0; i <= 5; ++i) {
    spec.times.push_back(2.0 * i);
    spec.poses.push_back(hold);
  }
  const Trajectory traj(spec);
  const auto stream = synth_imu(traj, ImuNoise{}, 200.0, 11);

  const Pose T_IC = nominal_T_IC();
  const Pose T_ISo = T_IC * scene.config.get_pose("extrinsic_t_cso_true");
  CameraIntrinsics intr;
  SonarModel model;
  RobotState init;
  init.q = hold.q;
  init.p = hold.t;

  Pipeline pipe(T_IC.inverse(), T_ISo, intr, PipelineConfig{}, init);
  std::size_t imu_pos = 0;
  int keyframes = 0;
  for (int f = 0; f <= 100; ++f) {
    const double t = 0.1 * f;
    FrameInput in;
    in.t = t;
    while (imu_pos < stream.size() && stream[imu_pos].t <= t + 1e-9)
      in.imu.push_back(stream[imu_pos++]);
    in.camera = synth_stereo(scene.world, hold * T_IC, intr, mix_seed(11, 1000 + f), false);
    if (f % 2 == 0) in.sonar = synth_sonar(scene.world, hold * T_ISo, model, mix_seed(11, 2000 + f));
    const FrameResult res = pipe.process_frame(in);
    if (res.keyframe) ++keyframes;
    CHECK((res.state.p - hold.t).norm() < 1e-6);
  }
  CHECK(keyframes == 1);
  CHECK(pipe.window.frames.size() == 1);
}

TEST_CASE("pipeline: noiseless tank run stays within a millimetre") {
  Config user;
  user.set("seed", "12");
  user.set("duration", "60");
  const SceneBundle scene = make_scene(user);
  const StreamedRun run = run_scene(scene, 60.0, 0.0, 12);
  INFO("keyframes: " << run.keyframes << "  ate: " << run.ate);
  CHECK(run.keyframes > 10);
  CHECK(run.ate < 1e-3);
  for (const auto& [t, rep] : run.pipeline.reports) {
    CHECK(rep.final_cost <= rep.initial_cost + 1e-12);
  }
}

TEST_CASE("pipeline: camera dropout mid-run is tolerated") {
  Config user;
  user.set("seed", "13");
  user.set("duration", "20");
  const SceneBundle scene = make_scene(user);
  StreamedRun run = run_scene(scene, 20.0, 10.0, 13);
  CHECK(run.keyframes > 5);
  CHECK(run.ate < 0.05);
  bool late_keyframe = false;
  for (const WindowKeyframe& f : run.pipeline.window.frames)
    if (f.t > 10.0) late_keyframe = true;
  CHECK(late_keyframe);
}

TEST_CASE("solve report: line record round trip") {
  SolveReport r;
  r.iterations = 7;
  r.initial_cost = 12.5;
  r.final_cost = 0.25;
  r.converged = true;
  r.cost_camera = 0.1;
  r.cost_imu = 0.05;
  r.cost_sonar = 0.1;
  r.wall_ms = 3.25;
  const std::string line = report_line(1.5, r);
  double t, c0, c1, cam, imu, so, wall;
  int iters, conv;
  REQUIRE(std::sscanf(line.c_str(), "%lf,%d,%lf,%lf,%lf,%lf,%lf,%lf,%d", &t, &iters, &c0, &c1,
                      &cam, &imu, &so, &wall, &conv) == 9);
  CHECK(t == 1.5);
  CHECK(iters == 7);
  CHECK(c0 == 12.5);
  CHECK(c1 == 0.25);
  CHECK(conv == 1);
}
