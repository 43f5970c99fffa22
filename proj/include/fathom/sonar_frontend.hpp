#pragma once

// Sonar feature pipeline: voxel surface features with PCA normals, motion-
// prior association across keyframes, planar RANSAC outlier rejection, and
// the 3D feature-distance residual with analytic pose Jacobians.
//
// Matched features carry a pair of points (p_i in the current sonar frame,
// p_k in the keyframe sonar frame) formed as means over mutually-paired
// member points of the two features: points are paired one-to-one (mutual
// nearest under the motion prior, gated by pair_tol), and each side averages
// only its paired members. Echoes of the same physical surface spot therefore
// contribute to both sides, which keeps the residual exactly zero at
// ground-truth poses on noiseless data instead of floored at the voxel size.

#include <array>
#include <fstream>
#include <map>
#include <stdexcept>
#include <vector>

#include <Eigen/Eigenvalues>

#include "fathom/geom.hpp"
#include "fathom/sensors.hpp"

namespace fathom {

struct SurfaceFeature {
  Vec3 mean = Vec3::Zero();    // P_m, sensor frame
  Vec3 normal = Vec3::Zero();  // unit, canonicalized toward the sensor origin
  int support = 0;             // neighbor-set size the normal was computed from
  std::array<int, 3> voxel{0, 0, 0};
  std::vector<Vec3> points;  // members of the source voxel
};

struct FeatureMatch {
  int current_index = -1;
  int keyframe_index = -1;
  int keyframe_id = -1;
  Vec3 p_i = Vec3::Zero();  // current sonar frame
  Vec3 p_k = Vec3::Zero();  // keyframe sonar frame
  int pair_count = 0;       // member points behind p_i / p_k
};

struct SonarFrontendConfig {
  double voxel_size = 0.5;       // m
  int gamma_count = 5;           // min neighbor-set size for a feature
  double gamma_dist = 0.5;       // association radius, m
  double normal_gate = 0.9;      // min normal dot product (cosine)
  double pair_tol = 0.15;        // member-point pairing gate, m
  double ransac_tol = 0.05;      // planar inlier tolerance, m
  int ransac_iters = 200;
  int window = 10;               // keyframes kept for association
  double kf_translation = 0.2;   // m
  double kf_rotation_deg = 10.0;
  double kf_overlap = 0.6;
};

namespace detail {
inline std::array<int, 3> voxel_of(const Vec3& p, double size) {
  return {static_cast<int>(std::floor(p.x() / size)), static_cast<int>(std::floor(p.y() / size)),
          static_cast<int>(std::floor(p.z() / size))};
}
}  // namespace detail

inline std::vector<SurfaceFeature> extract_features(const SonarScan& scan,
                                                    const SonarFrontendConfig& cfg) {
  std::map<std::array<int, 3>, std::vector<int>> grid;
  for (size_t i = 0; i < scan.points.size(); ++i)
    grid[detail::voxel_of(scan.points[i], cfg.voxel_size)].push_back(static_cast<int>(i));

  std::vector<SurfaceFeature> out;
  for (const auto& [key, members] : grid) {
    std::vector<int> neighborhood;
    for (int dx = -1; dx <= 1; ++dx)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dz = -1; dz <= 1; ++dz) {
          const auto it = grid.find({key[0] + dx, key[1] + dy, key[2] + dz});
          if (it != grid.end())
            neighborhood.insert(neighborhood.end(), it->second.begin(), it->second.end());
        }
    if (static_cast<int>(neighborhood.size()) < cfg.gamma_count) continue;

    Vec3 mean = Vec3::Zero();
    for (int i : neighborhood) mean += scan.points[i];
    mean /= static_cast<double>(neighborhood.size());
    Mat3 cov = Mat3::Zero();
    for (int i : neighborhood) {
      const Vec3 d = scan.points[i] - mean;
      cov += d * d.transpose();
    }
    cov /= static_cast<double>(neighborhood.size());

    const Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    Vec3 normal = eig.eigenvectors().col(0);  // smallest eigenvalue
    if (normal.dot(-mean) < 0.0) normal = -normal;

    SurfaceFeature f;
    f.mean = mean;
    f.normal = normal;
    f.support = static_cast<int>(neighborhood.size());
    f.voxel = key;
    f.points.reserve(members.size());
    for (int i : members) f.points.push_back(scan.points[i]);
    out.push_back(std::move(f));
  }
  return out;
}

// Associates current features to one keyframe's features. prior maps current
// sonar-frame points into the keyframe sonar frame. Each current feature gets
// at most one match: the nearest keyframe feature within gamma_dist whose
// normal agrees (dot > normal_gate), with the match points built from
// mutually-paired member points of the two features.
inline std::vector<FeatureMatch> associate(const std::vector<SurfaceFeature>& current,
                                           const std::vector<SurfaceFeature>& keymap,
                                           const Pose& prior, const SonarFrontendConfig& cfg,
                                           int keyframe_id = -1) {
  std::vector<FeatureMatch> out;
  for (size_t m = 0; m < current.size(); ++m) {
    const Vec3 p = prior * current[m].mean;
    const Vec3 n = prior.q * current[m].normal;
    int best = -1;
    double best_dist = cfg.gamma_dist;
    for (size_t k = 0; k < keymap.size(); ++k) {
      const double dist = (p - keymap[k].mean).norm();
      if (dist < best_dist && n.dot(keymap[k].normal) > cfg.normal_gate) {
        best = static_cast<int>(k);
        best_dist = dist;
      }
    }
    if (best < 0) continue;

    // mutual-nearest pairing of member points under the prior
    const std::vector<Vec3>& cur_pts = current[m].points;
    const std::vector<Vec3>& key_pts = keymap[best].points;
    std::vector<Vec3> cur_al(cur_pts.size());
    for (size_t i = 0; i < cur_pts.size(); ++i) cur_al[i] = prior * cur_pts[i];
    Vec3 sum_i = Vec3::Zero(), sum_k = Vec3::Zero();
    int pairs = 0;
    for (size_t i = 0; i < cur_al.size(); ++i) {
      int nearest = -1;
      double d_min = cfg.pair_tol;
      for (size_t j = 0; j < key_pts.size(); ++j) {
        const double d = (cur_al[i] - key_pts[j]).norm();
        if (d < d_min) {
          nearest = static_cast<int>(j);
          d_min = d;
        }
      }
      if (nearest < 0) continue;
      // mutual check: is i also the nearest current point to key_pts[nearest]?
      bool mutual = true;
      for (size_t i2 = 0; i2 < cur_al.size() && mutual; ++i2)
        if ((cur_al[i2] - key_pts[nearest]).norm() < d_min) mutual = (i2 == i);
      if (!mutual) continue;
      sum_i += cur_pts[i];
      sum_k += key_pts[nearest];
      ++pairs;
    }
    if (pairs == 0) continue;

    FeatureMatch match;
    match.current_index = static_cast<int>(m);
    match.keyframe_index = best;
    match.keyframe_id = keyframe_id;
    match.p_i = sum_i / pairs;
    match.p_k = sum_k / pairs;
    match.pair_count = pairs;
    out.push_back(match);
  }
  return out;
}

// Planar RANSAC over prior-aligned match points: project (prior * p_i) and
// p_k onto the keyframe sonar XY plane, fit 2-point 2D rigid hypotheses, keep
// matches within ransac_tol of the best model. Deterministic per seed.
inline std::vector<FeatureMatch> reject_outliers(const std::vector<FeatureMatch>& matches,
                                                 const Pose& prior,
                                                 const SonarFrontendConfig& cfg,
                                                 std::uint64_t seed) {
  if (matches.size() < 2) throw std::invalid_argument("reject_outliers: insufficient matches");
  const size_t n = matches.size();
  std::vector<Vec2> x(n), y(n);
  for (size_t i = 0; i < n; ++i) {
    x[i] = (prior * matches[i].p_i).head<2>();
    y[i] = matches[i].p_k.head<2>();
  }

  auto inliers_of = [&](double c, double s, const Vec2& t) {
    std::vector<char> in(n, 0);
    int count = 0;
    for (size_t i = 0; i < n; ++i) {
      const Vec2 pred(c * x[i].x() - s * x[i].y() + t.x(), s * x[i].x() + c * x[i].y() + t.y());
      if ((pred - y[i]).norm() < cfg.ransac_tol) {
        in[i] = 1;
        ++count;
      }
    }
    return std::make_pair(count, in);
  };

  int best_count = -1;
  std::vector<char> best_in;
  Rng rng(seed);
  auto try_pair = [&](size_t a, size_t b) {
    const Vec2 dx = x[b] - x[a];
    const Vec2 dy = y[b] - y[a];
    const double nx = dx.norm();
    if (nx < 1e-9) return;
    // rotation taking dx to dy's direction (lengths may differ under noise)
    const double cos_r = (dx.dot(dy)) / (nx * nx);
    const double sin_r = (dx.x() * dy.y() - dx.y() * dy.x()) / (nx * nx);
    const double norm = std::hypot(cos_r, sin_r);
    if (norm < 1e-9) return;
    const double c = cos_r / norm, s = sin_r / norm;
    const Vec2 t(y[a].x() - (c * x[a].x() - s * x[a].y()), y[a].y() - (s * x[a].x() + c * x[a].y()));
    auto [count, in] = inliers_of(c, s, t);
    if (count > best_count) {
      best_count = count;
      best_in = std::move(in);
    }
  };

  const size_t all_pairs = n * (n - 1) / 2;
  if (all_pairs <= static_cast<size_t>(cfg.ransac_iters)) {
    for (size_t a = 0; a < n; ++a)
      for (size_t b = a + 1; b < n; ++b) try_pair(a, b);
  } else {
    for (int it = 0; it < cfg.ransac_iters; ++it) {
      const size_t a = static_cast<size_t>(rng() % n);
      size_t b = static_cast<size_t>(rng() % n);
      if (a == b) b = (b + 1) % n;
      try_pair(a, b);
    }
  }

  std::vector<FeatureMatch> out;
  for (size_t i = 0; i < n; ++i)
    if (best_in[i]) out.push_back(matches[i]);
  return out;
}

// E_so = T_WI_k * T_ISo * p_k - T_WI_i * T_ISo * p_i
inline Vec3 sonar_residual(const Pose& T_WI_k, const Pose& T_WI_i, const Pose& T_ISo,
                           const FeatureMatch& match) {
  return T_WI_k * (T_ISo * match.p_k) - T_WI_i * (T_ISo * match.p_i);
}

// Jacobians w.r.t. the pose tangents [dp, dtheta] (p += dp, q <- q*exp(dtheta)).
inline Vec3 sonar_residual_jacobians(const Pose& T_WI_k, const Pose& T_WI_i, const Pose& T_ISo,
                                     const FeatureMatch& match, Eigen::Matrix<double, 3, 6>* J_k,
                                     Eigen::Matrix<double, 3, 6>* J_i) {
  if (J_k) {
    const Vec3 u_k = T_ISo * match.p_k;
    J_k->block<3, 3>(0, 0) = Mat3::Identity();
    J_k->block<3, 3>(0, 3) = -T_WI_k.R() * skew(u_k);
  }
  if (J_i) {
    const Vec3 u_i = T_ISo * match.p_i;
    J_i->block<3, 3>(0, 0) = -Mat3::Identity();
    J_i->block<3, 3>(0, 3) = T_WI_i.R() * skew(u_i);
  }
  return sonar_residual(T_WI_k, T_WI_i, T_ISo, match);
}

inline bool is_keyframe(const Pose& current, const Pose& last_keyframe, double overlap_ratio,
                        const SonarFrontendConfig& cfg) {
  const Pose rel = last_keyframe.inverse() * current;
  if (rel.t.norm() > cfg.kf_translation) return true;
  if (rotation_angle(current.q, last_keyframe.q) > deg2rad(cfg.kf_rotation_deg)) return true;
  return overlap_ratio < cfg.kf_overlap;
}

// Debug dump, one row per match: frame id, P^i, P^k, inlier flag.
inline void dump_matches(const std::string& path, int frame_id,
                         const std::vector<FeatureMatch>& matches,
                         const std::vector<char>& inlier) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("dump_matches: cannot write " + path);
  f << "frame,pi_x,pi_y,pi_z,pk_x,pk_y,pk_z,inlier\n";
  char buf[256];
  for (size_t i = 0; i < matches.size(); ++i) {
    const FeatureMatch& m = matches[i];
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d\n", frame_id,
                  m.p_i.x(), m.p_i.y(), m.p_i.z(), m.p_k.x(), m.p_k.y(), m.p_k.z(),
                  i < inlier.size() ? static_cast<int>(inlier[i]) : 1);
    f << buf;
  }
}

}  // namespace fathom
