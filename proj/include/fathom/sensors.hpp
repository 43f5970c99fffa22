#pragma once

// Sensor models and synthesis. Conventions:
//  * IMU/body frame: arbitrary right-handed; gravity reaction appears on the
//    accelerometer, i.e. a stationary gravity-aligned body reads (0, 0, g).
//  * Camera frame: z forward, x right, y down; rectified pinhole stereo with
//    the right camera displaced +baseline along camera x.
//  * Sonar frame: camera-like (z forward, x right, y down). Azimuth is the
//    angle in the x-z plane, elevation tilts toward -y (up).
//  * Noise sigmas for the IMU are continuous-time densities; discrete samples
//    at rate f are scaled by sqrt(f). Biases are constant over a dataset.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fathom/trajectory.hpp"
#include "fathom/world.hpp"

namespace fathom {

constexpr double kGravity = 9.81;
inline Vec3 gravity_w() { return Vec3(0, 0, kGravity); }

// ---------------------------------------------------------------------------
// IMU

struct ImuNoise {
  double sigma_g = 0.0;  // rad/s/sqrt(Hz)
  double sigma_a = 0.0;  // m/s^2/sqrt(Hz)
  Vec3 bias_g = Vec3::Zero();
  Vec3 bias_a = Vec3::Zero();
};

struct ImuSample {
  double t = 0.0;
  Vec3 gyro = Vec3::Zero();   // rad/s
  Vec3 accel = Vec3::Zero();  // m/s^2
};

inline std::vector<ImuSample> synth_imu(const Trajectory& traj, const ImuNoise& noise,
                                        double rate_hz, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double sg = noise.sigma_g * std::sqrt(rate_hz);
  const double sa = noise.sigma_a * std::sqrt(rate_hz);
  const auto n = static_cast<size_t>(std::llround(traj.duration() * rate_hz));
  std::vector<ImuSample> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / rate_hz;
    const TrajectorySample s = traj.sample(t);
    ImuSample m;
    m.t = t;
    m.gyro = s.w_b + noise.bias_g;
    m.accel = s.T_wb.q.conjugate() * (s.a_w + gravity_w()) + noise.bias_a;
    if (noise.sigma_g > 0) m.gyro += sg * Vec3(gauss(rng), gauss(rng), gauss(rng));
    if (noise.sigma_a > 0) m.accel += sa * Vec3(gauss(rng), gauss(rng), gauss(rng));
    out.push_back(m);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stereo camera

struct CameraIntrinsics {
  double fx = 400.0, fy = 400.0;
  double cx = 320.0, cy = 240.0;
  int width = 640, height = 480;
  double baseline = 0.1;  // metres, right camera at +x
  double sigma_px = 0.0;  // observation noise, applied to both cameras
};

struct VisualObs {
  std::uint8_t cam = 0;  // 0 left, 1 right
  std::uint32_t id = 0;  // landmark id
  Vec2 px = Vec2::Zero();
};

struct ImageRaster {
  int width = 0, height = 0;
  std::vector<Rgb8> pix;

  bool empty() const { return pix.empty(); }
  Rgb8& at(int u, int v) { return pix[static_cast<size_t>(v) * width + u]; }
  const Rgb8& at(int u, int v) const { return pix[static_cast<size_t>(v) * width + u]; }

  bool contains(const Vec2& p) const {
    return p.x() >= 0 && p.y() >= 0 && p.x() <= width - 1 && p.y() <= height - 1;
  }
  // Nearest-pixel lookup; caller checks contains().
  const Rgb8& nearest(const Vec2& p) const {
    const int u = static_cast<int>(clamp(std::lround(p.x()), 0, width - 1));
    const int v = static_cast<int>(clamp(std::lround(p.y()), 0, height - 1));
    return at(u, v);
  }
};

struct CameraFrame {
  double t = 0.0;
  std::vector<VisualObs> obs;
  ImageRaster raster;        // left camera, may be empty when not rendered/loaded
  std::string raster_file;   // dataset-relative path, empty if none
};

inline std::optional<Vec2> project_pinhole(const CameraIntrinsics& intr, const Vec3& p_cam) {
  if (p_cam.z() < 1e-6) return std::nullopt;
  return Vec2(intr.fx * p_cam.x() / p_cam.z() + intr.cx, intr.fy * p_cam.y() / p_cam.z() + intr.cy);
}

// Renders the left-camera view of the world by per-pixel raycasting.
inline ImageRaster render_camera_image(const World& world, const Pose& T_WC,
                                       const CameraIntrinsics& intr) {
  ImageRaster img;
  img.width = intr.width;
  img.height = intr.height;
  img.pix.assign(static_cast<size_t>(intr.width) * intr.height, world.background);
  const Mat3 R = T_WC.R();
  for (int v = 0; v < intr.height; ++v) {
    for (int u = 0; u < intr.width; ++u) {
      const Vec3 dir_c((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
      const Vec3 dir_w = R * dir_c;
      if (const auto hit = world.raycast(T_WC.t, dir_w, 1e6))
        img.at(u, v) = world.patches[hit->patch].color_at(hit->u_m, hit->v_m);
    }
  }
  return img;
}

// Projects world landmarks into both cameras of a rectified stereo pair.
// Occluded landmarks (another patch in front) are skipped; pixel noise is
// applied per camera and observations falling outside the image are dropped.
inline CameraFrame synth_stereo(const World& world, const Pose& T_WC, const CameraIntrinsics& intr,
                                std::uint64_t seed, bool with_raster) {
  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  CameraFrame frame;
  const Pose T_CW = T_WC.inverse();
  for (const WorldLandmark& lm : world.landmarks) {
    const Vec3 p_c = T_CW * lm.p;
    if (p_c.z() < 0.05) continue;
    const double range = (lm.p - T_WC.t).norm();
    const auto hit = world.raycast(T_WC.t, (lm.p - T_WC.t) / range, range + 1.0);
    if (!hit || hit->t < range - 1e-6) continue;  // occluded
    for (int cam = 0; cam < 2; ++cam) {
      Vec3 p = p_c;
      if (cam == 1) p.x() -= intr.baseline;
      auto px = project_pinhole(intr, p);
      if (!px) continue;
      if (intr.sigma_px > 0) *px += intr.sigma_px * Vec2(gauss(rng), gauss(rng));
      if (px->x() < 0 || px->y() < 0 || px->x() > intr.width - 1 || px->y() > intr.height - 1)
        continue;
      frame.obs.push_back(VisualObs{static_cast<std::uint8_t>(cam), lm.id, *px});
    }
  }
  if (with_raster) frame.raster = render_camera_image(world, T_WC, intr);
  return frame;
}

// ---------------------------------------------------------------------------
// 3D sonar

struct SonarModel {
  double max_range = 8.0;
  double hfov_deg = 90.0;
  double vfov_deg = 50.0;
  double sigma_r = 0.0;          // range noise (m)
  double sigma_theta = 0.0;      // angular noise (rad), azimuth and elevation
  double detect_prob = 1.0;      // per surface sample per scan
  double grazing_dropout = 0.0;  // detection scaled by cos(incidence)^dropout
};

struct SonarScan {
  double t = 0.0;
  std::vector<Vec3> points;  // sonar frame
};

inline Vec3 sonar_ray(double az, double el) {
  return Vec3(std::cos(el) * std::sin(az), -std::sin(el), std::cos(el) * std::cos(az));
}

// Returns the sensor-frame echoes of the world's fixed surface samples that
// fall inside the field of view: per-sample Bernoulli detection (attenuated at
// grazing incidence), then range/angular noise. Points pushed outside the
// field of view or past max range by noise are discarded.
inline SonarScan synth_sonar(const World& world, const Pose& T_WSo, const SonarModel& model,
                             std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  SonarScan scan;
  const Pose T_SoW = T_WSo.inverse();
  const double half_h = 0.5 * deg2rad(model.hfov_deg);
  const double half_v = 0.5 * deg2rad(model.vfov_deg);
  for (const SurfaceSample& s : world.samples) {
    const Vec3 x = T_SoW * s.p;
    const double r = x.norm();
    if (r < 1e-6 || r > model.max_range) continue;
    const double az = std::atan2(x.x(), x.z());
    const double el = std::atan2(-x.y(), std::hypot(x.x(), x.z()));
    if (std::abs(az) > half_h || std::abs(el) > half_v) continue;
    const double cos_inc = std::abs(s.n.dot((s.p - T_WSo.t).normalized()));
    const double p_det = model.detect_prob * std::pow(cos_inc, model.grazing_dropout);
    if (unif(rng) > p_det) continue;
    Vec3 p = x;
    if (model.sigma_r > 0 || model.sigma_theta > 0) {
      const double rn = r + model.sigma_r * gauss(rng);
      const double azn = az + model.sigma_theta * gauss(rng);
      const double eln = el + model.sigma_theta * gauss(rng);
      if (rn <= 0 || rn > model.max_range || std::abs(azn) > half_h || std::abs(eln) > half_v)
        continue;
      p = rn * sonar_ray(azn, eln);
    }
    scan.points.push_back(p);
  }
  return scan;
}

}  // namespace fathom
