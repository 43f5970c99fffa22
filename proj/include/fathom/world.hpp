#pragma once

// Synthetic world: textured planar rectangles. Each patch carries a procedural
// texture (checkerboard or linear gradient) so photometric lookups have an
// analytic reference. build() lays a deterministic sample grid on every patch;
// sonar returns come from these fixed world points, and the ground-truth
// landmark set is drawn from the same grid. The grid is offset half a spacing
// from the patch edges so no sample ever sits on a checker-cell boundary.

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "fathom/geom.hpp"

namespace fathom {

enum class TextureKind { kChecker, kGradient };

struct SurfacePatch {
  Vec3 origin = Vec3::Zero();  // one corner
  Vec3 edge_u = Vec3::UnitX();
  Vec3 edge_v = Vec3::UnitZ();
  TextureKind texture = TextureKind::kChecker;
  double checker_cell = 0.5;  // metres in patch coordinates
  Rgb8 color_a{200, 200, 200};
  Rgb8 color_b{30, 30, 30};

  Vec3 normal() const { return edge_u.cross(edge_v).normalized(); }
  double len_u() const { return edge_u.norm(); }
  double len_v() const { return edge_v.norm(); }
  Vec3 point_at(double u_m, double v_m) const {
    return origin + u_m / len_u() * edge_u + v_m / len_v() * edge_v;
  }

  Rgb8 color_at(double u_m, double v_m) const {
    if (texture == TextureKind::kChecker) {
      const long iu = static_cast<long>(std::floor(u_m / checker_cell));
      const long iv = static_cast<long>(std::floor(v_m / checker_cell));
      return ((iu + iv) & 1) ? color_b : color_a;
    }
    const double s = clamp(u_m / len_u(), 0.0, 1.0);
    Rgb8 c;
    for (int i = 0; i < 3; ++i)
      c[i] = static_cast<std::uint8_t>(std::lround((1.0 - s) * color_a[i] + s * color_b[i]));
    return c;
  }
};

struct SurfaceSample {
  std::uint32_t id = 0;
  Vec3 p = Vec3::Zero();
  Vec3 n = Vec3::Zero();  // patch normal
  Rgb8 color{0, 0, 0};
  int patch = 0;
  bool is_landmark = false;
};

struct WorldLandmark {
  std::uint32_t id = 0;
  Vec3 p = Vec3::Zero();
  Rgb8 color{0, 0, 0};
};

struct RayHit {
  double t = 0.0;
  int patch = -1;
  double u_m = 0.0, v_m = 0.0;
};

struct World {
  std::vector<SurfacePatch> patches;
  double sample_spacing = 0.25;   // surface sample grid pitch (m)
  int landmark_stride = 1;        // every nth sample (per axis) is a landmark
  Rgb8 background{18, 24, 34};

  std::vector<SurfaceSample> samples;
  std::vector<WorldLandmark> landmarks;

  // Lays the deterministic sample/landmark grid. Call after editing patches.
  void build() {
    samples.clear();
    landmarks.clear();
    std::uint32_t next_id = 0;
    for (size_t pi = 0; pi < patches.size(); ++pi) {
      const SurfacePatch& patch = patches[pi];
      const double off = 0.5 * sample_spacing;
      int iu = 0;
      for (double u = off; u < patch.len_u() - off + 1e-9; u += sample_spacing, ++iu) {
        int iv = 0;
        for (double v = off; v < patch.len_v() - off + 1e-9; v += sample_spacing, ++iv) {
          SurfaceSample s;
          s.id = next_id++;
          s.p = patch.point_at(u, v);
          s.n = patch.normal();
          s.color = patch.color_at(u, v);
          s.patch = static_cast<int>(pi);
          s.is_landmark = (iu % landmark_stride == 0) && (iv % landmark_stride == 0);
          if (s.is_landmark) landmarks.push_back(WorldLandmark{s.id, s.p, s.color});
          samples.push_back(s);
        }
      }
    }
  }

  // Nearest patch intersection of the ray o + t*d, t in (t_min_ray, t_max].
  std::optional<RayHit> raycast(const Vec3& o, const Vec3& d, double t_max,
                                double t_min_ray = 1e-6) const {
    std::optional<RayHit> best;
    for (size_t pi = 0; pi < patches.size(); ++pi) {
      const SurfacePatch& patch = patches[pi];
      const Vec3 n = patch.normal();
      const double denom = n.dot(d);
      if (std::abs(denom) < 1e-12) continue;
      const double t = n.dot(patch.origin - o) / denom;
      if (t <= t_min_ray || t > t_max) continue;
      const Vec3 q = o + t * d - patch.origin;
      const double u = q.dot(patch.edge_u) / patch.edge_u.squaredNorm();
      const double v = q.dot(patch.edge_v) / patch.edge_v.squaredNorm();
      if (u < 0.0 || u > 1.0 || v < 0.0 || v > 1.0) continue;
      if (!best || t < best->t) best = RayHit{t, static_cast<int>(pi), u * patch.len_u(), v * patch.len_v()};
    }
    return best;
  }

  // Texture colour at a world point lying on some patch (within tol of it).
  std::optional<Rgb8> color_at_world(const Vec3& p, double tol = 1e-2) const {
    for (const SurfacePatch& patch : patches) {
      const Vec3 n = patch.normal();
      if (std::abs(n.dot(p - patch.origin)) > tol) continue;
      const Vec3 q = p - patch.origin;
      const double u = q.dot(patch.edge_u) / patch.edge_u.squaredNorm();
      const double v = q.dot(patch.edge_v) / patch.edge_v.squaredNorm();
      if (u < -1e-9 || u > 1.0 + 1e-9 || v < -1e-9 || v > 1.0 + 1e-9) continue;
      return patch.color_at(u * patch.len_u(), v * patch.len_v());
    }
    return std::nullopt;
  }
};

}  // namespace fathom
