// fathom CLI: dataset synthesis, extrinsic calibration, windowed odometry with
// dense fusion, trajectory evaluation, and standalone map export.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fathom/calibration.hpp"
#include "fathom/eval.hpp"
#include "fathom/mapping.hpp"
#include "fathom/pipeline.hpp"
#include "fathom/scenes.hpp"

using namespace fathom;

namespace {

constexpr const char* kUsage =
    "usage: fathom <command> [options]\n"
    "\n"
    "commands:\n"
    "  simulate   synthesize a dataset\n"
    "             --out DIR [--set key=value ...]\n"
    "  calibrate  estimate the camera->sonar extrinsic from a dataset\n"
    "             --data DIR --out FILE [--set refine_mu=V ...]\n"
    "  run        sliding-window odometry + dense map\n"
    "             --data DIR --out DIR [--extrinsic FILE] [--no-camera] [--no-sonar]\n"
    "             [--blur-camera] [--camera-dropout T0:T1] [--set key=value ...]\n"
    "  evaluate   trajectory error against a reference\n"
    "             --est FILE --gt FILE [--align se3|none] [--interval S] [--csv FILE]\n"
    "  map        fuse sonar scans along a given trajectory\n"
    "             --data DIR --traj FILE --out FILE [--extrinsic FILE] [--set key=value ...]\n";

struct Args {
  std::map<std::string, std::string> opt;
  std::set<std::string> flag;
  Config overrides;

  const std::string& need(const std::string& name) const {
    auto it = opt.find(name);
    if (it == opt.end()) throw std::runtime_error("missing required --" + name);
    return it->second;
  }
  std::string get(const std::string& name, const std::string& dflt) const {
    auto it = opt.find(name);
    return it == opt.end() ? dflt : it->second;
  }
};

Args parse_args(int argc, char** argv, int first, const std::set<std::string>& valued,
                const std::set<std::string>& boolean) {
  Args a;
  for (int i = first; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg.rfind("--", 0) != 0) throw std::runtime_error("unexpected argument '" + arg + "'");
    const std::string name = arg.substr(2);
    if (name == "set") {
      if (++i >= argc) throw std::runtime_error("--set needs key=value");
      const std::string kv = argv[i];
      const auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0)
        throw std::runtime_error("--set needs key=value, got '" + kv + "'");
      a.overrides.set(kv.substr(0, eq), kv.substr(eq + 1));
    } else if (valued.count(name)) {
      if (++i >= argc) throw std::runtime_error("--" + name + " needs a value");
      a.opt[name] = argv[i];
    } else if (boolean.count(name)) {
      a.flag.insert(name);
    } else {
      throw std::runtime_error("unknown option --" + name);
    }
  }
  return a;
}

MapConfig map_config_from(const Config& o) {
  MapConfig m;
  m.voxel_size = o.get_double("map_voxel_size", m.voxel_size);
  m.truncation_voxels = o.get_double("map_truncation_voxels", m.truncation_voxels);
  m.bilinear = o.get_int("map_bilinear", m.bilinear ? 1 : 0) != 0;
  m.zbuffer = o.get_int("map_zbuffer", m.zbuffer ? 1 : 0) != 0;
  return m;
}

// Nearest-in-time lookup over a sorted (t, Pose) track.
std::optional<Pose> nearest_pose(const std::vector<std::pair<double, Pose>>& track, double t,
                                 double max_gap) {
  if (track.empty()) return std::nullopt;
  auto it = std::lower_bound(track.begin(), track.end(), t,
                             [](const auto& a, double v) { return a.first < v; });
  auto best = it;
  if (it == track.end() || (it != track.begin() && t - std::prev(it)->first < it->first - t))
    best = std::prev(it);
  if (std::abs(best->first - t) > max_gap) return std::nullopt;
  return best->second;
}

double half_median_dt(const std::vector<double>& times) {
  if (times.size() < 2) return std::numeric_limits<double>::infinity();
  std::vector<double> dts;
  dts.reserve(times.size() - 1);
  for (std::size_t i = 1; i < times.size(); ++i) dts.push_back(times[i] - times[i - 1]);
  std::sort(dts.begin(), dts.end());
  return 0.5 * dts[dts.size() / 2] + 1e-12;
}

struct BuiltMap {
  TsdfVolume volume;
  Mesh mesh;
  int scans_used = 0;
};

BuiltMap build_map(const Dataset& ds, const std::vector<std::pair<double, Pose>>& track,
                   const Pose& T_IC, const Pose& T_ISo, const MapConfig& mcfg) {
  if (track.empty()) throw std::runtime_error("map: empty trajectory");
  BuiltMap out;
  out.volume = make_volume(mcfg);
  const CameraIntrinsics intr = ds.intrinsics();

  std::vector<double> track_times, frame_times;
  for (const auto& [t, p] : track) track_times.push_back(t);
  for (const CameraFrame& f : ds.frames) frame_times.push_back(f.t);
  const double track_gap = half_median_dt(track_times);
  const double frame_gap = half_median_dt(frame_times);

  for (const SonarScan& scan : ds.scans) {
    const std::optional<Pose> T_WI = nearest_pose(track, scan.t, track_gap);
    if (!T_WI) continue;
    const Vec3 origin = (*T_WI * T_ISo).t;

    ImageRaster img;
    Pose T_WC = *T_WI * T_IC;
    if (!ds.frames.empty()) {
      auto it = std::lower_bound(ds.frames.begin(), ds.frames.end(), scan.t,
                                 [](const CameraFrame& f, double v) { return f.t < v; });
      auto best = it;
      if (it == ds.frames.end() ||
          (it != ds.frames.begin() && scan.t - std::prev(it)->t < it->t - scan.t))
        best = std::prev(it);
      if (std::abs(best->t - scan.t) <= frame_gap && !best->raster_file.empty()) {
        img = ds.load_raster(*best);
        if (const std::optional<Pose> Ti = nearest_pose(track, best->t, track_gap))
          T_WC = *Ti * T_IC;
      }
    }

    const std::vector<DenseMapPoint> pts = render_scan(scan, *T_WI, T_ISo, img, T_WC, intr, mcfg);
    integrate(&out.volume, pts, origin);
    ++out.scans_used;
  }
  out.mesh = extract_mesh(out.volume);
  return out;
}

int cmd_simulate(const Args& a) {
  const std::string out = a.need("out");
  simulate_dataset(a.overrides, out);
  std::ifstream in(out + "/config.txt");
  std::stringstream ss;
  ss << in.rdbuf();
  const Config cfg = Config::parse(ss.str());
  std::printf("simulate: wrote %s (scene=%s seed=%lld duration=%gs)\n", out.c_str(),
              cfg.get_str("scene", "?").c_str(), cfg.get_int("seed", 0),
              cfg.get_double("duration", 0.0));
  return 0;
}

int cmd_calibrate(const Args& a) {
  const Dataset ds = read_dataset(a.need("data"));
  const std::string out = a.need("out");
  if (ds.scans.size() < 4) throw std::runtime_error("calibrate: need at least 4 sonar scans");
  if (ds.groundtruth.size() < 2)
    throw std::runtime_error("calibrate: dataset has no reference trajectory");

  SonarFrontendConfig fcfg;
  const CoarseOdometryResult odo = coarse_sonar_odometry(ds.scans, fcfg);

  const Pose T_IC = ds.T_IC();
  const double gt_gap = [&] {
    std::vector<double> ts;
    for (const auto& [t, p] : ds.groundtruth) ts.push_back(t);
    return half_median_dt(ts);
  }();

  PoseStreamPair pairs;
  std::vector<std::size_t> kept;  // scan indices behind each pair entry
  for (std::size_t i = 0; i < ds.scans.size(); ++i) {
    const std::optional<Pose> T_WI = nearest_pose(ds.groundtruth, ds.scans[i].t, gt_gap);
    if (!T_WI) continue;
    pairs.T_WC.push_back(*T_WI * T_IC);
    pairs.T_So.push_back(odo.poses[i]);
    kept.push_back(i);
  }
  if (kept.size() < 4)
    throw std::runtime_error("calibrate: too few scans align with the reference trajectory");

  const HandEyeResult he = coarse_calibrate(pairs);
  CalibResult r;
  r.coarse = he.calibrated;
  r.excitation = he.excitation;
  r.consistency_init = he.consistency_init;
  r.consistency_refined = he.consistency_refined;

  // landmark refinement on the densest matched scan
  if (!ds.gt_landmarks.empty()) {
    std::size_t best = kept.front();
    std::size_t best_pair = 0;
    for (std::size_t k = 0; k < kept.size(); ++k)
      if (ds.scans[kept[k]].points.size() > ds.scans[best].points.size()) {
        best = kept[k];
        best_pair = k;
      }
    std::vector<Vec3> landmarks;
    for (const WorldLandmark& l : ds.gt_landmarks) landmarks.push_back(l.p);
    const double mu = a.overrides.get_double("refine_mu", 0.3);
    try {
      const RefineResult rr =
          refine_calibrate(r.coarse, landmarks, ds.scans[best], pairs.T_WC[best_pair], mu);
      r.refined = rr.refined;
      r.has_refined = true;
      r.refine_correspondences = rr.correspondences;
      r.refine_mean_dist_before = rr.mean_dist_before;
      r.refine_mean_dist_after = rr.mean_dist_after;
    } catch (const std::exception& e) {
      std::fprintf(stderr, "calibrate: refinement skipped (%s)\n", e.what());
    }
  }

  save_calib_report(out, r);

  std::printf("excitation_rad = %s\n", format_double(r.excitation).c_str());
  if (r.excitation < 0.1)
    std::printf("warning: rotational excitation is low; the extrinsic is weakly observable\n");
  std::printf("consistency_init = %s\n", format_double(r.consistency_init).c_str());
  std::printf("consistency_refined = %s\n", format_double(r.consistency_refined).c_str());
  auto print_stage = [&](const char* tag, const Pose& T) {
    std::printf("%s_t_cso = %s %s %s %s %s %s %s\n", tag, format_double(T.q.w()).c_str(),
                format_double(T.q.x()).c_str(), format_double(T.q.y()).c_str(),
                format_double(T.q.z()).c_str(), format_double(T.t.x()).c_str(),
                format_double(T.t.y()).c_str(), format_double(T.t.z()).c_str());
  };
  print_stage("coarse", r.coarse);
  if (r.has_refined) print_stage("refined", r.refined);
  if (ds.config.has("extrinsic_t_cso_true")) {
    const Pose truth = ds.T_CSo_true();
    auto print_err = [&](const char* tag, const Pose& T) {
      std::printf("%s_rot_err_deg = %s\n%s_trans_err_m = %s\n", tag,
                  format_double(rad2deg(rotation_angle(T.q, truth.q))).c_str(), tag,
                  format_double((T.t - truth.t).norm()).c_str());
    };
    print_err("coarse", r.coarse);
    if (r.has_refined) print_err("refined", r.refined);
  }
  std::printf("calibrate: wrote %s\n", out.c_str());
  return 0;
}

int cmd_run(const Args& a) {
  const bool use_cam = !a.flag.count("no-camera");
  const bool use_sonar = !a.flag.count("no-sonar");
  if (!use_cam && !use_sonar) {
    std::fprintf(stderr,
                 "run: at least one exteroceptive stream is required; drop only one of "
                 "--no-camera/--no-sonar\n");
    return 2;
  }
  const Dataset ds = read_dataset(a.need("data"));
  const std::string outdir = a.need("out");

  bool has_dropout = false;
  double drop0 = 0.0, drop1 = 0.0;
  if (a.opt.count("camera-dropout")) {
    const std::string& s = a.opt.at("camera-dropout");
    if (std::sscanf(s.c_str(), "%lf:%lf", &drop0, &drop1) != 2 || !(drop0 < drop1))
      throw std::runtime_error("--camera-dropout wants T0:T1 with T0 < T1, got '" + s + "'");
    has_dropout = true;
  }

  const Pose T_IC = ds.T_IC();
  Pose T_CSo = ds.T_CSo_true();
  if (a.opt.count("extrinsic")) {
    const CalibResult c = load_calib_report(a.opt.at("extrinsic"));
    T_CSo = c.has_refined ? c.refined : c.coarse;
  }
  const Pose T_C0I = T_IC.inverse();
  const Pose T_ISo = T_IC * T_CSo;

  PipelineConfig pcfg;
  pcfg.window_capacity =
      static_cast<std::size_t>(a.overrides.get_int("window_capacity", 10));
  // noise floors keep the information matrices finite on noiseless synthetic data
  pcfg.solver.sigma_px =
      a.overrides.get_double("solver_sigma_px",
                             std::max(ds.config.get_double("cam_sigma_px", 0.0), 1.0));
  pcfg.solver.sigma_so =
      a.overrides.get_double("solver_sigma_so",
                             std::max(ds.config.get_double("sonar_sigma_r", 0.0), 0.05));
  pcfg.imu_sigma_g = std::max(ds.config.get_double("imu_sigma_g", 0.0), 1e-4);
  pcfg.imu_sigma_a = std::max(ds.config.get_double("imu_sigma_a", 0.0), 1e-3);

  RobotState init;
  if (!ds.groundtruth.empty()) {
    init.q = ds.groundtruth.front().second.q;
    init.p = ds.groundtruth.front().second.t;
    if (ds.groundtruth.size() >= 2) {
      const auto& [t0, p0] = ds.groundtruth[0];
      const auto& [t1, p1] = ds.groundtruth[1];
      if (t1 > t0) init.v = (p1.t - p0.t) / (t1 - t0);
    }
  }

  Pipeline pipe(T_C0I, T_ISo, ds.intrinsics(), pcfg, init);

  const bool blur = a.flag.count("blur-camera") != 0;
  const double kInf = std::numeric_limits<double>::infinity();
  std::size_t fi = 0, si = 0, ii = 0;
  int n_frames = 0, n_keyframes = 0, n_dropped = 0;
  while (true) {
    while (use_cam && fi < ds.frames.size() && has_dropout && ds.frames[fi].t >= drop0 &&
           ds.frames[fi].t < drop1) {
      ++fi;
      ++n_dropped;
    }
    const double tf = (use_cam && fi < ds.frames.size()) ? ds.frames[fi].t : kInf;
    const double ts = (use_sonar && si < ds.scans.size()) ? ds.scans[si].t : kInf;
    if (tf == kInf && ts == kInf) break;
    const double t = std::min(tf, ts);

    FrameInput in;
    in.t = t;
    while (ii < ds.imu.size() && ds.imu[ii].t <= t + 1e-9) in.imu.push_back(ds.imu[ii++]);
    if (tf <= t + 1e-9) {
      in.camera = ds.frames[fi];
      if (blur) {
        Rng rng(mix_seed(31, fi));
        std::normal_distribution<double> px(0.0, 2.0);
        for (VisualObs& o : in.camera->obs) o.px += Vec2(px(rng), px(rng));
      }
      ++fi;
    }
    if (ts <= t + 1e-9) {
      in.sonar = ds.scans[si];
      ++si;
    }

    const FrameResult res = pipe.process_frame(in);
    ++n_frames;
    if (res.keyframe) ++n_keyframes;
  }
  if (pipe.trajectory.empty()) throw std::runtime_error("run: dataset produced no frames");

  std::filesystem::create_directories(outdir);
  write_tum(outdir + "/trajectory.tum", pipe.trajectory);
  {
    std::ofstream rf(outdir + "/reports.csv");
    rf << "t,iterations,initial_cost,final_cost,cost_camera,cost_imu,cost_sonar,wall_ms,"
          "converged\n";
    for (const auto& [t, rep] : pipe.reports) rf << report_line(t, rep) << "\n";
  }
  const MapConfig mcfg = map_config_from(a.overrides);
  const BuiltMap bm = build_map(ds, pipe.trajectory, T_IC, T_ISo, mcfg);
  export_ply(bm.mesh, outdir + "/map.ply");
  {
    std::ofstream sf(outdir + "/map_stats.txt");
    sf << volume_stats(bm.volume);
  }

  std::printf("run: %d frames (%d keyframes", n_frames, n_keyframes);
  if (has_dropout) std::printf(", %d camera frames dropped", n_dropped);
  std::printf(")\n");
  std::printf("run: map fused %d scans -> %zu vertices, %zu triangles\n", bm.scans_used,
              bm.mesh.vertices.size(), bm.mesh.triangles.size() / 3);
  std::printf("run: wrote %s/trajectory.tum %s/reports.csv %s/map.ply\n", outdir.c_str(),
              outdir.c_str(), outdir.c_str());
  return 0;
}

int cmd_evaluate(const Args& a) {
  const auto est = read_tum(a.need("est"));
  const auto ref = read_tum(a.need("gt"));
  const std::string mode = a.get("align", "se3");
  if (mode != "se3" && mode != "none")
    throw std::runtime_error("--align wants se3 or none, got '" + mode + "'");
  const double interval = a.opt.count("interval") ? std::stod(a.opt.at("interval")) : 20.0;
  if (!(interval > 0)) throw std::runtime_error("--interval must be positive");

  const Pose A = mode == "none" ? Pose() : align(est, ref);
  const EvalReport rep = rmse(est, ref, A, interval);
  std::fputs(report_text(rep).c_str(), stdout);

  const std::string csv = a.get("csv", a.need("est") + ".intervals.csv");
  std::ofstream cf(csv);
  cf << report_csv(rep);
  std::printf("intervals_csv = %s\n", csv.c_str());
  return 0;
}

int cmd_map(const Args& a) {
  const Dataset ds = read_dataset(a.need("data"));
  const auto track = read_tum(a.need("traj"));
  const std::string out = a.need("out");

  const Pose T_IC = ds.T_IC();
  Pose T_CSo = ds.T_CSo_true();
  if (a.opt.count("extrinsic")) {
    const CalibResult c = load_calib_report(a.opt.at("extrinsic"));
    T_CSo = c.has_refined ? c.refined : c.coarse;
  }
  const BuiltMap bm = build_map(ds, track, T_IC, T_IC * T_CSo, map_config_from(a.overrides));
  export_ply(bm.mesh, out);
  std::fputs(volume_stats(bm.volume).c_str(), stdout);
  std::printf("map: fused %d scans -> %zu vertices, %zu triangles\n", bm.scans_used,
              bm.mesh.vertices.size(), bm.mesh.triangles.size() / 3);
  std::printf("map: wrote %s\n", out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fputs(kUsage, stderr);
    return 1;
  }
  const std::string cmd = argv[1];
  try {
    if (cmd == "simulate")
      return cmd_simulate(parse_args(argc, argv, 2, {"out"}, {}));
    if (cmd == "calibrate")
      return cmd_calibrate(parse_args(argc, argv, 2, {"data", "out"}, {}));
    if (cmd == "run")
      return cmd_run(parse_args(argc, argv, 2, {"data", "out", "extrinsic", "camera-dropout"},
                                {"no-camera", "no-sonar", "blur-camera"}));
    if (cmd == "evaluate")
      return cmd_evaluate(parse_args(argc, argv, 2, {"est", "gt", "align", "interval", "csv"}, {}));
    if (cmd == "map")
      return cmd_map(parse_args(argc, argv, 2, {"data", "traj", "out", "extrinsic"}, {}));
    if (cmd == "--help" || cmd == "help") {
      std::fputs(kUsage, stdout);
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fathom %s: %s\n", cmd.c_str(), e.what());
    return 1;
  }
  std::fprintf(stderr, "fathom: unknown command '%s'\n\n%s", cmd.c_str(), kUsage);
  return 1;
}
