#pragma once

// Dense map construction: sonar scans placed in the world at the optimized
// pose and coloured by projecting into the camera image, fused into a sparse
// truncated-signed-distance volume, and meshed with marching cubes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fathom/sensors.hpp"
#include "fathom/world.hpp"

namespace fathom {

struct DenseMapPoint {
  Vec3 p_w = Vec3::Zero();
  Rgb8 color{0, 0, 0};
  bool color_valid = false;  // projection landed in-frame with positive depth
};

struct MapConfig {
  double voxel_size = 0.05;
  int truncation_voxels = 3;
  bool bilinear = false;  // colour sampling; nearest-pixel by default
  bool zbuffer = false;   // cull points occluded by nearer scan points before colouring

  double tau() const { return truncation_voxels * voxel_size; }
};

inline Rgb8 sample_bilinear(const ImageRaster& img, const Vec2& p) {
  const double x = clamp(p.x(), 0.0, static_cast<double>(img.width - 1));
  const double y = clamp(p.y(), 0.0, static_cast<double>(img.height - 1));
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, img.width - 1);
  const int y1 = std::min(y0 + 1, img.height - 1);
  const double fx = x - x0, fy = y - y0;
  Rgb8 out;
  for (int c = 0; c < 3; ++c) {
    const double v = (1 - fx) * (1 - fy) * img.at(x0, y0)[c] + fx * (1 - fy) * img.at(x1, y0)[c] +
                     (1 - fx) * fy * img.at(x0, y1)[c] + fx * fy * img.at(x1, y1)[c];
    out[c] = static_cast<std::uint8_t>(std::lround(v));
  }
  return out;
}

// Each sonar point becomes a world point at the given body pose; its colour is
// looked up by projecting the world point into the camera image. Points that
// fall outside the image or behind the camera keep their position with
// color_valid = false.
inline std::vector<DenseMapPoint> render_scan(const SonarScan& scan, const Pose& T_WI,
                                              const Pose& T_ISo, const ImageRaster& image,
                                              const Pose& T_WC, const CameraIntrinsics& intr,
                                              const MapConfig& cfg = MapConfig{}) {
  const Pose T_WSo = T_WI * T_ISo;
  const Pose T_CW = T_WC.inverse();

  std::vector<DenseMapPoint> out(scan.points.size());
  std::vector<Vec3> p_cam(scan.points.size());
  for (std::size_t i = 0; i < scan.points.size(); ++i) {
    out[i].p_w = T_WSo * scan.points[i];
    p_cam[i] = T_CW * out[i].p_w;
  }

  std::vector<double> zbuf;
  if (cfg.zbuffer && !image.empty()) {
    zbuf.assign(static_cast<std::size_t>(image.width) * image.height, 1e18);
    for (std::size_t i = 0; i < p_cam.size(); ++i) {
      const auto px = project_pinhole(intr, p_cam[i]);
      if (!px || !image.contains(*px)) continue;
      const int u = static_cast<int>(std::lround(px->x()));
      const int v = static_cast<int>(std::lround(px->y()));
      double& z = zbuf[static_cast<std::size_t>(v) * image.width + u];
      z = std::min(z, p_cam[i].z());
    }
  }

  for (std::size_t i = 0; i < out.size(); ++i) {
    if (image.empty()) continue;
    const auto px = project_pinhole(intr, p_cam[i]);
    if (!px || !image.contains(*px)) continue;
    if (!zbuf.empty()) {
      const int u = static_cast<int>(std::lround(px->x()));
      const int v = static_cast<int>(std::lround(px->y()));
      if (p_cam[i].z() > zbuf[static_cast<std::size_t>(v) * image.width + u] + 1e-6) continue;
    }
    out[i].color = cfg.bilinear ? sample_bilinear(image, *px) : image.nearest(*px);
    out[i].color_valid = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sparse TSDF volume

using VoxelKey = std::array<int, 3>;

struct TsdfVoxel {
  double dist = 0.0;  // weighted mean signed distance, |dist| <= tau
  double weight = 0.0;
  Vec3 color = Vec3::Zero();  // weighted mean, one channel per component
  double color_weight = 0.0;
};

struct TsdfVolume {
  double voxel_size = 0.05;
  double tau = 0.15;
  std::map<VoxelKey, TsdfVoxel> voxels;

  VoxelKey key_of(const Vec3& p) const {
    return {static_cast<int>(std::floor(p.x() / voxel_size)),
            static_cast<int>(std::floor(p.y() / voxel_size)),
            static_cast<int>(std::floor(p.z() / voxel_size))};
  }
  Vec3 center_of(const VoxelKey& k) const {
    return Vec3((k[0] + 0.5) * voxel_size, (k[1] + 0.5) * voxel_size, (k[2] + 0.5) * voxel_size);
  }
};

inline TsdfVolume make_volume(const MapConfig& cfg) {
  TsdfVolume v;
  v.voxel_size = cfg.voxel_size;
  v.tau = cfg.tau();
  return v;
}

// Projective update: voxels along the sensor ray within tau of each point get
// the range difference to the point, clamped, folded into per-voxel running
// means. Colour is accumulated only from colour-valid points.
inline void integrate(TsdfVolume* vol, const std::vector<DenseMapPoint>& points,
                      const Vec3& origin) {
  const double step = 0.5 * vol->voxel_size;
  std::vector<VoxelKey> touched;
  for (const DenseMapPoint& m : points) {
    const double range = (m.p_w - origin).norm();
    if (range < 1e-9) continue;
    const Vec3 dir = (m.p_w - origin) / range;

    touched.clear();
    const double t1 = range + vol->tau;
    for (double t = std::max(range - vol->tau, 0.0); t <= t1 + 1e-12; t += step) {
      const VoxelKey k = vol->key_of(origin + t * dir);
      if (std::find(touched.begin(), touched.end(), k) == touched.end()) touched.push_back(k);
    }

    for (const VoxelKey& k : touched) {
      TsdfVoxel& vx = vol->voxels[k];
      const double sdf =
          clamp(range - (vol->center_of(k) - origin).norm(), -vol->tau, vol->tau);
      vx.dist = (vx.dist * vx.weight + sdf) / (vx.weight + 1.0);
      vx.weight += 1.0;
      if (m.color_valid) {
        const Vec3 c(m.color[0], m.color[1], m.color[2]);
        vx.color = (vx.color * vx.color_weight + c) / (vx.color_weight + 1.0);
        vx.color_weight += 1.0;
      }
    }
  }
}

inline std::string volume_stats(const TsdfVolume& vol) {
  std::size_t occupied = 0;
  for (const auto& [k, vx] : vol.voxels)
    if (std::abs(vx.dist) < vol.voxel_size) ++occupied;
  std::ostringstream os;
  os << "voxels=" << vol.voxels.size() << "\noccupied=" << occupied << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Marching cubes

namespace detail {

// Corner numbering: bit i set when the corner's stored distance is negative.
inline constexpr int kMcCornerOffset[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                                              {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};

inline constexpr int kMcEdgeCorner[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                                             {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};

inline constexpr int kMcTriTable[256][16] = {
    {-1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {0, 8, 3, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {0, 1, 9, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {1, 8, 3, 9, 8, 1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {1, 2, 10, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {0, 8, 3, 1, 2, 10, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {9, 2, 10, 0, 2, 9, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {2, 8, 3, 2, 10, 8, 10, 9, 8, -1, -1, -1, -1, -1, -1, -1},
    {3, 11, 2, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {0, 11, 2, 8, 11, 0, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {1, 9, 0, 2, 3, 11, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {1, 11, 2, 1, 9, 11, 9, 8, 11, -1, -1, -1, -1, -1, -1, -1},
    {3, 10, 1, 11, 10, 3, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {0, 10, 1, 0, 8, 10, 8, 11, 10, -1, -1, -1, -1, -1, -1, -1},
    {3, 9, 0, 3, 11, 9, 11, 10, 9, -1, -1, -1, -1, -1, -1, -1},
    {9, 8, 10, 10, 8, 11, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {4, 7, 8, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {4, 3, 0, 7, 3, 4, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {0, 1, 9, 8, 4, 7, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {4, 1, 9, 4, 7, 1, 7, 3, 1, -1, -1, -1, -1, -1, -1, -1},
    {1, 2, 10, 8, 4, 7, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {3, 4, 7, 3, 0, 4, 1, 2, 10, -1, -1, -1, -1, -1, -1, -1},
    {9, 2, 10, 9, 0, 2, 8, 4, 7, -1, -1, -1, -1, -1, -1, -1},
    {2, 10, 9, 2, 9, 7, 2, 7, 3, 7, 9, 4, -1, -1, -1, -1},
    {8, 4, 7, 3, 11, 2, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {11, 4, 7, 11, 2, 4, 2, 0, 4, -1, -1, -1, -1, -1, -1, -1},
    {9, 0, 1, 8, 4, 7, 2, 3, 11, -1, -1, -1, -1, -1, -1, -1},
    {4, 7, 11, 9, 4, 11, 9, 11, 2, 9, 2, 1, -1, -1, -1, -1},
    {3, 10, 1, 3, 11, 10, 7, 8, 4, -1, -1, -1, -1, -1, -1, -1},
    {1, 11, 10, 1, 4, 11, 1, 0, 4, 7, 11, 4, -1, -1, -1, -1},
    {4, 7, 8, 9, 0, 11, 9, 11, 10, 11, 0, 3, -1, -1, -1, -1},
    {4, 7, 11, 4, 11, 9, 9, 11, 10, -1, -1, -1, -1, -1, -1, -1},
    {9, 5, 4, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {9, 5, 4, 0, 8, 3, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {0, 5, 4, 1, 5, 0, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {8, 5, 4, 8, 3, 5, 3, 1, 5, -1, -1, -1, -1, -1, -1, -1},
    {1, 2, 10, 9, 5, 4, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {3, 0, 8, 1, 2, 10, 4, 9, 5, -1, -1, -1, -1, -1, -1, -1},
    {5, 2, 10, 5, 4, 2, 4, 0, 2, -1, -1, -1, -1, -1, -1, -1},
    {2, 10, 5, 3, 2, 5, 3, 5, 4, 3, 4, 8, -1, -1, -1, -1},
    {9, 5, 4, 2, 3, 11, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {0, 11, 2, 0, 8, 11, 4, 9, 5, -1, -1, -1, -1, -1, -1, -1},
    {0, 5, 4, 0, 1, 5, 2, 3, 11, -1, -1, -1, -1, -1, -1, -1},
    {2, 1, 5, 2, 5, 8, 2, 8, 11, 4, 8, 5, -1, -1, -1, -1},
    {10, 3, 11, 10, 1, 3, 9, 5, 4, -1, -1, -1, -1, -1, -1, -1},
    {4, 9, 5, 0, 8, 1, 8, 10, 1, 8, 11, 10, -1, -1, -1, -1},
    {5, 4, 0, 5, 0, 11, 5, 11, 10, 11, 0, 3, -1, -1, -1, -1},
    {5, 4, 8, 5, 8, 10, 10, 8, 11, -1, -1, -1, -1, -1, -1, -1},
    {9, 7, 8, 5, 7, 9, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {9, 3, 0, 9, 5, 3, 5, 7, 3, -1, -1, -1, -1, -1, -1, -1},
    {0, 7, 8, 0, 1, 7, 1, 5, 7, -1, -1, -1, -1, -1, -1, -1},
    {1, 5, 3, 3, 5, 7, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {9, 7, 8, 9, 5, 7, 10, 1, 2, -1, -1, -1, -1, -1, -1, -1},
    {10, 1, 2, 9, 5, 0, 5, 3, 0, 5, 7, 3, -1, -1, -1, -1},
    {8, 0, 2, 8, 2, 5, 8, 5, 7, 10, 5, 2, -1, -1, -1, -1},
    {2, 10, 5, 2, 5, 3, 3, 5, 7, -1, -1, -1, -1, -1, -1, -1},
    {7, 9, 5, 7, 8, 9, 3, 11, 2, -1, -1, -1, -1, -1, -1, -1},
    {9, 5, 7, 9, 7, 2, 9, 2, 0, 2, 7, 11, -1, -1, -1, -1},
    {2, 3, 11, 0, 1, 8, 1, 7, 8, 1, 5, 7, -1, -1, -1, -1},
    {11, 2, 1, 11, 1, 7, 7, 1, 5, -1, -1, -1, -1, -1, -1, -1},
    {9, 5, 8, 8, 5, 7, 10, 1, 3, 10, 3, 11, -1, -1, -1, -1},
    {5, 7, 0, 5, 0, 9, 7, 11, 0, 1, 0, 10, 11, 10, 0, -1},
    {11, 10, 0, 11, 0, 3, 10, 5, 0, 8, 0, 7, 5, 7, 0, -1},
    {11, 10, 5, 7, 11, 5, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {10, 6, 5, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {0, 8, 3, 5, 10, 6, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {9, 0, 1, 5, 10, 6, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {1, 8, 3, 1, 9, 8, 5, 10, 6, -1, -1, -1, -1, -1, -1, -1},
    {1, 6, 5, 2, 6, 1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {1, 6, 5, 1, 2, 6, 3, 0, 8, -1, -1, -1, -1, -1, -1, -1},
    {9, 6, 5, 9, 0, 6, 0, 2, 6, -1, -1, -1, -1, -1, -1, -1},
    {5, 9, 8, 5, 8, 2, 5, 2, 6, 3, 2, 8, -1, -1, -1, -1},
    {2, 3, 11, 10, 6, 5, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {11, 0, 8, 11, 2, 0, 10, 6, 5, -1, -1, -1, -1, -1, -1, -1},
    {0, 1, 9, 2, 3, 11, 5, 10, 6, -1, -1, -1, -1, -1, -1, -1},
    {5, 10, 6, 1, 9, 2, 9, 11, 2, 9, 8, 11, -1, -1, -1, -1},
    {6, 3, 11, 6, 5, 3, 5, 1, 3, -1, -1, -1, -1, -1, -1, -1},
    {0, 8, 11, 0, 11, 5, 0, 5, 1, 5, 11, 6, -1, -1, -1, -1},
    {3, 11, 6, 0, 3, 6, 0, 6, 5, 0, 5, 9, -1, -1, -1, -1},
    {6, 5, 9, 6, 9, 11, 11, 9, 8, -1, -1, -1, -1, -1, -1, -1},
    {5, 10, 6, 4, 7, 8, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {4, 3, 0, 4, 7, 3, 6, 5, 10, -1, -1, -1, -1, -1, -1, -1},
    {1, 9, 0, 5, 10, 6, 8, 4, 7, -1, -1, -1, -1, -1, -1, -1},
    {10, 6, 5, 1, 9, 7, 1, 7, 3, 7, 9, 4, -1, -1, -1, -1},
    {6, 1, 2, 6, 5, 1, 4, 7, 8, -1, -1, -1, -1, -1, -1, -1},
    {1, 2, 5, 5, 2, 6, 3, 0, 4, 3, 4, 7, -1, -1, -1, -1},
    {8, 4, 7, 9, 0, 5, 0, 6, 5, 0, 2, 6, -1, -1, -1, -1},
    {7, 3, 9, 7, 9, 4, 3, 2, 9, 5, 9, 6, 2, 6, 9, -1},
    {3, 11, 2, 7, 8, 4, 10, 6, 5, -1, -1, -1, -1, -1, -1, -1},
    {5, 10, 6, 4, 7, 2, 4, 2, 0, 2, 7, 11, -1, -1, -1, -1},
    {0, 1, 9, 4, 7, 8, 2, 3, 11, 5, 10, 6, -1, -1, -1, -1},
    {9, 2, 1, 9, 11, 2, 9, 4, 11, 7, 11, 4, 5, 10, 6, -1},
    {8, 4, 7, 3, 11, 5, 3, 5, 1, 5, 11, 6, -1, -1, -1, -1},
    {5, 1, 11, 5, 11, 6, 1, 0, 11, 7, 11, 4, 0, 4, 11, -1},
    {0, 5, 9, 0, 6, 5, 0, 3, 6, 11, 6, 3, 8, 4, 7, -1},
    {6, 5, 9, 6, 9, 11, 4, 7, 9, 7, 11, 9, -1, -1, -1, -1},
    {10, 4, 9, 6, 4, 10, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {4, 10, 6, 4, 9, 10, 0, 8, 3, -1, -1, -1, -1, -1, -1, -1},
    {10, 0, 1, 10, 6, 0, 6, 4, 0, -1, -1, -1, -1, -1, -1, -1},
    {8, 3, 1, 8, 1, 6, 8, 6, 4, 6, 1, 10, -1, -1, -1, -1},
    {1, 4, 9, 1, 2, 4, 2, 6, 4, -1, -1, -1, -1, -1, -1, -1},
    {3, 0, 8, 1, 2, 9, 2, 4, 9, 2, 6, 4, -1, -1, -1, -1},
    {0, 2, 4, 4, 2, 6, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {8, 3, 2, 8, 2, 4, 4, 2, 6, -1, -1, -1, -1, -1, -1, -1},
    {10, 4, 9, 10, 6, 4, 11, 2, 3, -1, -1, -1, -1, -1, -1, -1},
    {0, 8, 2, 2, 8, 11, 4, 9, 10, 4, 10, 6, -1, -1, -1, -1},
    {3, 11, 2, 0, 1, 6, 0, 6, 4, 6, 1, 10, -1, -1, -1, -1},
    {6, 4, 1, 6, 1, 10, 4, 8, 1, 2, 1, 11, 8, 11, 1, -1},
    {9, 6, 4, 9, 3, 6, 9, 1, 3, 11, 6, 3, -1, -1, -1, -1},
    {8, 11, 1, 8, 1, 0, 11, 6, 1, 9, 1, 4, 6, 4, 1, -1},
    {3, 11, 6, 3, 6, 0, 0, 6, 4, -1, -1, -1, -1, -1, -1, -1},
    {6, 4, 8, 11, 6, 8, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {7, 10, 6, 7, 8, 10, 8, 9, 10, -1, -1, -1, -1, -1, -1, -1},
    {0, 7, 3, 0, 10, 7, 0, 9, 10, 6, 7, 10, -1, -1, -1, -1},
    {10, 6, 7, 1, 10, 7, 1, 7, 8, 1, 8, 0, -1, -1, -1, -1},
    {10, 6, 7, 10, 7, 1, 1, 7, 3, -1, -1, -1, -1, -1, -1, -1},
    {1, 2, 6, 1, 6, 8, 1, 8, 9, 8, 6, 7, -1, -1, -1, -1},
    {2, 6, 9, 2, 9, 1, 6, 7, 9, 0, 9, 3, 7, 3, 9, -1},
    {7, 8, 0, 7, 0, 6, 6, 0, 2, -1, -1, -1, -1, -1, -1, -1},
    {7, 3, 2, 6, 7, 2, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {2, 3, 11, 10, 6, 8, 10, 8, 9, 8, 6, 7, -1, -1, -1, -1},
    {2, 0, 7, 2, 7, 11, 0, 9, 7, 6, 7, 10, 9, 10, 7, -1},
    {1, 8, 0, 1, 7, 8, 1, 10, 7, 6, 7, 10, 2, 3, 11, -1},
    {11, 2, 1, 11, 1, 7, 10, 6, 1, 6, 7, 1, -1, -1, -1, -1},
    {8, 9, 6, 8, 6, 7, 9, 1, 6, 11, 6, 3, 1, 3, 6, -1},
    {0, 9, 1, 11, 6, 7, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {7, 8, 0, 7, 0, 6, 3, 11, 0, 11, 6, 0, -1, -1, -1, -1},
    {7, 11, 6, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {7, 6, 11, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {3, 0, 8, 11, 7, 6, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {0, 1, 9, 11, 7, 6, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {8, 1, 9, 8, 3, 1, 11, 7, 6, -1, -1, -1, -1, -1, -1, -1},
    {10, 1, 2, 6, 11, 7, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {1, 2, 10, 3, 0, 8, 6, 11, 7, -1, -1, -1, -1, -1, -1, -1},
    {2, 9, 0, 2, 10, 9, 6, 11, 7, -1, -1, -1, -1, -1, -1, -1},
    {6, 11, 7, 2, 10, 3, 10, 8, 3, 10, 9, 8, -1, -1, -1, -1},
    {7, 2, 3, 6, 2, 7, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {7, 0, 8, 7, 6, 0, 6, 2, 0, -1, -1, -1, -1, -1, -1, -1},
    {2, 7, 6, 2, 3, 7, 0, 1, 9, -1, -1, -1, -1, -1, -1, -1},
    {1, 6, 2, 1, 8, 6, 1, 9, 8, 8, 7, 6, -1, -1, -1, -1},
    {10, 7, 6, 10, 1, 7, 1, 3, 7, -1, -1, -1, -1, -1, -1, -1},
    {10, 7, 6, 1, 7, 10, 1, 8, 7, 1, 0, 8, -1, -1, -1, -1},
    {0, 3, 7, 0, 7, 10, 0, 10, 9, 6, 10, 7, -1, -1, -1, -1},
    {7, 6, 10, 7, 10, 8, 8, 10, 9, -1, -1, -1, -1, -1, -1, -1},
    {6, 8, 4, 11, 8, 6, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {3, 6, 11, 3, 0, 6, 0, 4, 6, -1, -1, -1, -1, -1, -1, -1},
    {8, 6, 11, 8, 4, 6, 9, 0, 1, -1, -1, -1, -1, -1, -1, -1},
    {9, 4, 6, 9, 6, 3, 9, 3, 1, 11, 3, 6, -1, -1, -1, -1},
    {6, 8, 4, 6, 11, 8, 2, 10, 1, -1, -1, -1, -1, -1, -1, -1},
    {1, 2, 10, 3, 0, 11, 0, 6, 11, 0, 4, 6, -1, -1, -1, -1},
    {4, 11, 8, 4, 6, 11, 0, 2, 9, 2, 10, 9, -1, -1, -1, -1},
    {10, 9, 3, 10, 3, 2, 9, 4, 3, 11, 3, 6, 4, 6, 3, -1},
    {8, 2, 3, 8, 4, 2, 4, 6, 2, -1, -1, -1, -1, -1, -1, -1},
    {0, 4, 2, 4, 6, 2, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {1, 9, 0, 2, 3, 4, 2, 4, 6, 4, 3, 8, -1, -1, -1, -1},
    {1, 9, 4, 1, 4, 2, 2, 4, 6, -1, -1, -1, -1, -1, -1, -1},
    {8, 1, 3, 8, 6, 1, 8, 4, 6, 6, 10, 1, -1, -1, -1, -1},
    {10, 1, 0, 10, 0, 6, 6, 0, 4, -1, -1, -1, -1, -1, -1, -1},
    {4, 6, 3, 4, 3, 8, 6, 10, 3, 0, 3, 9, 10, 9, 3, -1},
    {10, 9, 4, 6, 10, 4, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {4, 9, 5, 7, 6, 11, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {0, 8, 3, 4, 9, 5, 11, 7, 6, -1, -1, -1, -1, -1, -1, -1},
    {5, 0, 1, 5, 4, 0, 7, 6, 11, -1, -1, -1, -1, -1, -1, -1},
    {11, 7, 6, 8, 3, 4, 3, 5, 4, 3, 1, 5, -1, -1, -1, -1},
    {9, 5, 4, 10, 1, 2, 7, 6, 11, -1, -1, -1, -1, -1, -1, -1},
    {6, 11, 7, 1, 2, 10, 0, 8, 3, 4, 9, 5, -1, -1, -1, -1},
    {7, 6, 11, 5, 4, 10, 4, 2, 10, 4, 0, 2, -1, -1, -1, -1},
    {3, 4, 8, 3, 5, 4, 3, 2, 5, 10, 5, 2, 11, 7, 6, -1},
    {7, 2, 3, 7, 6, 2, 5, 4, 9, -1, -1, -1, -1, -1, -1, -1},
    {9, 5, 4, 0, 8, 6, 0, 6, 2, 6, 8, 7, -1, -1, -1, -1},
    {3, 6, 2, 3, 7, 6, 1, 5, 0, 5, 4, 0, -1, -1, -1, -1},
    {6, 2, 8, 6, 8, 7, 2, 1, 8, 4, 8, 5, 1, 5, 8, -1},
    {9, 5, 4, 10, 1, 6, 1, 7, 6, 1, 3, 7, -1, -1, -1, -1},
    {1, 6, 10, 1, 7, 6, 1, 0, 7, 8, 7, 0, 9, 5, 4, -1},
    {4, 0, 10, 4, 10, 5, 0, 3, 10, 6, 10, 7, 3, 7, 10, -1},
    {7, 6, 10, 7, 10, 8, 5, 4, 10, 4, 8, 10, -1, -1, -1, -1},
    {6, 9, 5, 6, 11, 9, 11, 8, 9, -1, -1, -1, -1, -1, -1, -1},
    {3, 6, 11, 0, 6, 3, 0, 5, 6, 0, 9, 5, -1, -1, -1, -1},
    {0, 11, 8, 0, 5, 11, 0, 1, 5, 5, 6, 11, -1, -1, -1, -1},
    {6, 11, 3, 6, 3, 5, 5, 3, 1, -1, -1, -1, -1, -1, -1, -1},
    {1, 2, 10, 9, 5, 11, 9, 11, 8, 11, 5, 6, -1, -1, -1, -1},
    {0, 11, 3, 0, 6, 11, 0, 9, 6, 5, 6, 9, 1, 2, 10, -1},
    {11, 8, 5, 11, 5, 6, 8, 0, 5, 10, 5, 2, 0, 2, 5, -1},
    {6, 11, 3, 6, 3, 5, 2, 10, 3, 10, 5, 3, -1, -1, -1, -1},
    {5, 8, 9, 5, 2, 8, 5, 6, 2, 3, 8, 2, -1, -1, -1, -1},
    {9, 5, 6, 9, 6, 0, 0, 6, 2, -1, -1, -1, -1, -1, -1, -1},
    {1, 5, 8, 1, 8, 0, 5, 6, 8, 3, 8, 2, 6, 2, 8, -1},
    {1, 5, 6, 2, 1, 6, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {1, 3, 6, 1, 6, 10, 3, 8, 6, 5, 6, 9, 8, 9, 6, -1},
    {10, 1, 0, 10, 0, 6, 9, 5, 0, 5, 6, 0, -1, -1, -1, -1},
    {0, 3, 8, 5, 6, 10, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {10, 5, 6, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {11, 5, 10, 7, 5, 11, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {11, 5, 10, 11, 7, 5, 8, 3, 0, -1, -1, -1, -1, -1, -1, -1},
    {5, 11, 7, 5, 10, 11, 1, 9, 0, -1, -1, -1, -1, -1, -1, -1},
    {10, 7, 5, 10, 11, 7, 9, 8, 1, 8, 3, 1, -1, -1, -1, -1},
    {11, 1, 2, 11, 7, 1, 7, 5, 1, -1, -1, -1, -1, -1, -1, -1},
    {0, 8, 3, 1, 2, 7, 1, 7, 5, 7, 2, 11, -1, -1, -1, -1},
    {9, 7, 5, 9, 2, 7, 9, 0, 2, 2, 11, 7, -1, -1, -1, -1},
    {7, 5, 2, 7, 2, 11, 5, 9, 2, 3, 2, 8, 9, 8, 2, -1},
    {2, 5, 10, 2, 3, 5, 3, 7, 5, -1, -1, -1, -1, -1, -1, -1},
    {8, 2, 0, 8, 5, 2, 8, 7, 5, 10, 2, 5, -1, -1, -1, -1},
    {9, 0, 1, 5, 10, 3, 5, 3, 7, 3, 10, 2, -1, -1, -1, -1},
    {9, 8, 2, 9, 2, 1, 8, 7, 2, 10, 2, 5, 7, 5, 2, -1},
    {1, 3, 5, 3, 7, 5, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {0, 8, 7, 0, 7, 1, 1, 7, 5, -1, -1, -1, -1, -1, -1, -1},
    {9, 0, 3, 9, 3, 5, 5, 3, 7, -1, -1, -1, -1, -1, -1, -1},
    {9, 8, 7, 5, 9, 7, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {5, 8, 4, 5, 10, 8, 10, 11, 8, -1, -1, -1, -1, -1, -1, -1},
    {5, 0, 4, 5, 11, 0, 5, 10, 11, 11, 3, 0, -1, -1, -1, -1},
    {0, 1, 9, 8, 4, 10, 8, 10, 11, 10, 4, 5, -1, -1, -1, -1},
    {10, 11, 4, 10, 4, 5, 11, 3, 4, 9, 4, 1, 3, 1, 4, -1},
    {2, 5, 1, 2, 8, 5, 2, 11, 8, 4, 5, 8, -1, -1, -1, -1},
    {0, 4, 11, 0, 11, 3, 4, 5, 11, 2, 11, 1, 5, 1, 11, -1},
    {0, 2, 5, 0, 5, 9, 2, 11, 5, 4, 5, 8, 11, 8, 5, -1},
    {9, 4, 5, 2, 11, 3, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {2, 5, 10, 3, 5, 2, 3, 4, 5, 3, 8, 4, -1, -1, -1, -1},
    {5, 10, 2, 5, 2, 4, 4, 2, 0, -1, -1, -1, -1, -1, -1, -1},
    {3, 10, 2, 3, 5, 10, 3, 8, 5, 4, 5, 8, 0, 1, 9, -1},
    {5, 10, 2, 5, 2, 4, 1, 9, 2, 9, 4, 2, -1, -1, -1, -1},
    {8, 4, 5, 8, 5, 3, 3, 5, 1, -1, -1, -1, -1, -1, -1, -1},
    {0, 4, 5, 1, 0, 5, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {8, 4, 5, 8, 5, 3, 9, 0, 5, 0, 3, 5, -1, -1, -1, -1},
    {9, 4, 5, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {4, 11, 7, 4, 9, 11, 9, 10, 11, -1, -1, -1, -1, -1, -1, -1},
    {0, 8, 3, 4, 9, 7, 9, 11, 7, 9, 10, 11, -1, -1, -1, -1},
    {1, 10, 11, 1, 11, 4, 1, 4, 0, 7, 4, 11, -1, -1, -1, -1},
    {3, 1, 4, 3, 4, 8, 1, 10, 4, 7, 4, 11, 10, 11, 4, -1},
    {4, 11, 7, 9, 11, 4, 9, 2, 11, 9, 1, 2, -1, -1, -1, -1},
    {9, 7, 4, 9, 11, 7, 9, 1, 11, 2, 11, 1, 0, 8, 3, -1},
    {11, 7, 4, 11, 4, 2, 2, 4, 0, -1, -1, -1, -1, -1, -1, -1},
    {11, 7, 4, 11, 4, 2, 8, 3, 4, 3, 2, 4, -1, -1, -1, -1},
    {2, 9, 10, 2, 7, 9, 2, 3, 7, 7, 4, 9, -1, -1, -1, -1},
    {9, 10, 7, 9, 7, 4, 10, 2, 7, 8, 7, 0, 2, 0, 7, -1},
    {3, 7, 10, 3, 10, 2, 7, 4, 10, 1, 10, 0, 4, 0, 10, -1},
    {1, 10, 2, 8, 7, 4, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {4, 9, 1, 4, 1, 7, 7, 1, 3, -1, -1, -1, -1, -1, -1, -1},
    {4, 9, 1, 4, 1, 7, 0, 8, 1, 8, 7, 1, -1, -1, -1, -1},
    {4, 0, 3, 7, 4, 3, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {4, 8, 7, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {9, 10, 8, 10, 11, 8, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {3, 0, 9, 3, 9, 11, 11, 9, 10, -1, -1, -1, -1, -1, -1, -1},
    {0, 1, 10, 0, 10, 8, 8, 10, 11, -1, -1, -1, -1, -1, -1, -1},
    {3, 1, 10, 11, 3, 10, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {1, 2, 11, 1, 11, 9, 9, 11, 8, -1, -1, -1, -1, -1, -1, -1},
    {3, 0, 9, 3, 9, 11, 1, 2, 9, 2, 11, 9, -1, -1, -1, -1},
    {0, 2, 11, 8, 0, 11, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {3, 2, 11, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {2, 3, 8, 2, 8, 10, 10, 8, 9, -1, -1, -1, -1, -1, -1, -1},
    {9, 10, 2, 0, 9, 2, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {2, 3, 8, 2, 8, 10, 0, 1, 8, 1, 10, 8, -1, -1, -1, -1},
    {1, 10, 2, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {1, 3, 8, 9, 1, 8, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {0, 9, 1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {0, 3, 8, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1},
    {-1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1}};

}  // namespace detail

struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<Rgb8> colors;  // one per vertex
  std::vector<std::array<int, 3>> triangles;
};

// Marching cubes over the sparse volume. Only cells with all eight corner
// voxels allocated are polygonized, so the mesh never extends into unobserved
// space. Vertices on shared cell edges are welded.
inline Mesh extract_mesh(const TsdfVolume& vol) {
  using detail::kMcCornerOffset;
  using detail::kMcEdgeCorner;
  using detail::kMcTriTable;

  std::set<VoxelKey> bases;
  for (const auto& [k, vx] : vol.voxels)
    for (const auto& off : kMcCornerOffset)
      bases.insert(VoxelKey{k[0] - off[0], k[1] - off[1], k[2] - off[2]});

  Mesh mesh;
  std::map<std::array<int, 4>, int> edge_vertex;  // lattice edge (lower corner, axis) -> index

  for (const VoxelKey& base : bases) {
    const TsdfVoxel* corner[8];
    VoxelKey ckey[8];
    bool complete = true;
    for (int i = 0; i < 8; ++i) {
      ckey[i] = {base[0] + kMcCornerOffset[i][0], base[1] + kMcCornerOffset[i][1],
                 base[2] + kMcCornerOffset[i][2]};
      const auto it = vol.voxels.find(ckey[i]);
      if (it == vol.voxels.end()) {
        complete = false;
        break;
      }
      corner[i] = &it->second;
    }
    if (!complete) continue;

    int ci = 0;
    for (int i = 0; i < 8; ++i)
      if (corner[i]->dist < 0.0) ci |= 1 << i;
    if (ci == 0 || ci == 255) continue;

    for (int t = 0; kMcTriTable[ci][t] != -1; t += 3) {
      int idx[3];
      for (int v = 0; v < 3; ++v) {
        const int e = kMcTriTable[ci][t + v];
        const int a = kMcEdgeCorner[e][0], b = kMcEdgeCorner[e][1];
        int axis = 0;
        for (int d = 0; d < 3; ++d)
          if (ckey[a][d] != ckey[b][d]) axis = d;
        const VoxelKey lo{std::min(ckey[a][0], ckey[b][0]), std::min(ckey[a][1], ckey[b][1]),
                          std::min(ckey[a][2], ckey[b][2])};
        const std::array<int, 4> ekey{lo[0], lo[1], lo[2], axis};

        const auto [it, inserted] = edge_vertex.try_emplace(ekey, static_cast<int>(mesh.vertices.size()));
        if (inserted) {
          const double da = corner[a]->dist, db = corner[b]->dist;
          const double s = clamp(da / (da - db), 0.0, 1.0);
          const Vec3 pa = vol.center_of(ckey[a]), pb = vol.center_of(ckey[b]);
          mesh.vertices.push_back(pa + s * (pb - pa));
          const Vec3 neutral(128.0, 128.0, 128.0);
          const Vec3 ca = corner[a]->color_weight > 0 ? corner[a]->color : neutral;
          const Vec3 cb = corner[b]->color_weight > 0 ? corner[b]->color : neutral;
          const Vec3 mix = (1.0 - s) * ca + s * cb;
          mesh.colors.push_back(Rgb8{static_cast<std::uint8_t>(std::lround(clamp(mix.x(), 0.0, 255.0))),
                                     static_cast<std::uint8_t>(std::lround(clamp(mix.y(), 0.0, 255.0))),
                                     static_cast<std::uint8_t>(std::lround(clamp(mix.z(), 0.0, 255.0)))});
        }
        idx[v] = it->second;
      }
      if (idx[0] != idx[1] && idx[1] != idx[2] && idx[2] != idx[0])
        mesh.triangles.push_back({idx[0], idx[1], idx[2]});
    }
  }
  return mesh;
}

// ---------------------------------------------------------------------------
// Binary PLY

inline void export_ply(const Mesh& mesh, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("export_ply: cannot write " + path);
  f << "ply\nformat binary_little_endian 1.0\n"
    << "element vertex " << mesh.vertices.size() << "\n"
    << "property double x\nproperty double y\nproperty double z\n"
    << "property uchar red\nproperty uchar green\nproperty uchar blue\n"
    << "element face " << mesh.triangles.size() << "\n"
    << "property list uchar int vertex_indices\n"
    << "end_header\n";
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    double xyz[3] = {mesh.vertices[i].x(), mesh.vertices[i].y(), mesh.vertices[i].z()};
    f.write(reinterpret_cast<const char*>(xyz), sizeof(xyz));
    const Rgb8 c = i < mesh.colors.size() ? mesh.colors[i] : Rgb8{128, 128, 128};
    f.write(reinterpret_cast<const char*>(c.data()), 3);
  }
  for (const auto& tri : mesh.triangles) {
    const std::uint8_t n = 3;
    f.write(reinterpret_cast<const char*>(&n), 1);
    std::int32_t v[3] = {tri[0], tri[1], tri[2]};
    f.write(reinterpret_cast<const char*>(v), sizeof(v));
  }
  if (!f) throw std::runtime_error("export_ply: write failed for " + path);
}

inline void export_ply(const std::vector<DenseMapPoint>& points, const std::string& path) {
  Mesh m;
  m.vertices.reserve(points.size());
  m.colors.reserve(points.size());
  for (const DenseMapPoint& p : points) {
    m.vertices.push_back(p.p_w);
    m.colors.push_back(p.color);
  }
  export_ply(m, path);
}

// Reads the subset of PLY written above: binary little-endian, double or
// float positions, optional uchar colour, int or uint face indices.
inline Mesh read_ply(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_ply: cannot open " + path);

  std::string line;
  std::getline(f, line);
  if (line != "ply") throw std::runtime_error("read_ply: not a PLY file: " + path);

  std::size_t n_vertex = 0, n_face = 0;
  bool binary_le = false;
  bool double_pos = false;
  bool has_color = false;
  std::string element;
  while (std::getline(f, line)) {
    std::istringstream is(line);
    std::string tok;
    is >> tok;
    if (tok == "end_header") break;
    if (tok == "format") {
      std::string fmt;
      is >> fmt;
      binary_le = (fmt == "binary_little_endian");
    } else if (tok == "element") {
      std::size_t n;
      is >> element >> n;
      if (element == "vertex") n_vertex = n;
      if (element == "face") n_face = n;
    } else if (tok == "property" && element == "vertex") {
      std::string type, name;
      is >> type >> name;
      if (name == "x") double_pos = (type == "double");
      if (name == "red") has_color = true;
    }
  }
  if (!binary_le) throw std::runtime_error("read_ply: expected binary little-endian: " + path);

  Mesh mesh;
  mesh.vertices.resize(n_vertex);
  if (has_color) mesh.colors.resize(n_vertex);
  for (std::size_t i = 0; i < n_vertex; ++i) {
    if (double_pos) {
      double xyz[3];
      f.read(reinterpret_cast<char*>(xyz), sizeof(xyz));
      mesh.vertices[i] = Vec3(xyz[0], xyz[1], xyz[2]);
    } else {
      float xyz[3];
      f.read(reinterpret_cast<char*>(xyz), sizeof(xyz));
      mesh.vertices[i] = Vec3(xyz[0], xyz[1], xyz[2]);
    }
    if (has_color) f.read(reinterpret_cast<char*>(mesh.colors[i].data()), 3);
  }
  mesh.triangles.resize(n_face);
  for (std::size_t i = 0; i < n_face; ++i) {
    std::uint8_t n = 0;
    f.read(reinterpret_cast<char*>(&n), 1);
    if (n != 3) throw std::runtime_error("read_ply: non-triangle face in " + path);
    std::int32_t v[3];
    f.read(reinterpret_cast<char*>(v), sizeof(v));
    mesh.triangles[i] = {v[0], v[1], v[2]};
  }
  if (!f) throw std::runtime_error("read_ply: truncated file: " + path);
  return mesh;
}

}  // namespace fathom
