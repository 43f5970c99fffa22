#pragma once

// Camera->sonar extrinsic calibration, coarse to fine:
//  1. coarse sonar odometry (feature association + point-to-plane alignment),
//  2. hand-eye solve of the relative-pose constraint over the initial pose
//     streams (closed-form init + nonlinear refinement),
//  3. refinement by registering the sonar cloud against camera landmarks.

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "fathom/dataset.hpp"
#include "fathom/sonar_frontend.hpp"
#include "fathom/visual_frontend.hpp"

namespace fathom {

struct PoseStreamPair {
  std::vector<Pose> T_WC;  // camera poses, world frame
  std::vector<Pose> T_So;  // sonar odometry poses, first-scan frame
};

struct CoarseOdometryResult {
  std::vector<Pose> poses;        // T_So_i
  std::vector<char> degenerate;   // carried forward or rank-deficient solve
};

// Point-to-plane Gauss-Newton for the relative pose T mapping current-frame
// match points onto the keyframe features' planes: r_j = u_j . (T p_i - p_k).
// Directions whose normal-equation eigenvalue falls below eig_floor_rel of
// the largest are unobservable from this match set (e.g. sliding along a
// single plane); they are projected out of the update, left at the prior, and
// reported through *degenerate.
inline Pose align_point_to_plane(const std::vector<FeatureMatch>& matches,
                                 const std::vector<SurfaceFeature>& key_feats, const Pose& prior,
                                 bool* degenerate, int iters = 10,
                                 double eig_floor_rel = 1e-4) {
  Pose T = prior;
  bool rank_deficient = false;
  for (int it = 0; it < iters; ++it) {
    Mat6 H = Mat6::Zero();
    Vec6 g = Vec6::Zero();
    for (const FeatureMatch& m : matches) {
      const Vec3& u = key_feats[m.keyframe_index].normal;
      const Vec3 x = T * m.p_i;
      const double r = u.dot(x - m.p_k);
      Vec6 J;
      J.head<3>() = u;
      J.tail<3>() = x.cross(u);
      H += J * J.transpose();
      g -= J * r;
    }
    const Eigen::SelfAdjointEigenSolver<Mat6> eig(H);
    const double floor = eig_floor_rel * std::max(eig.eigenvalues()(5), 1e-12);
    Vec6 delta = Vec6::Zero();
    for (int l = 0; l < 6; ++l) {
      if (eig.eigenvalues()(l) <= floor) {
        rank_deficient = true;
        continue;
      }
      const Vec6 v = eig.eigenvectors().col(l);
      delta += v.dot(g) / eig.eigenvalues()(l) * v;
    }
    T = Pose(quat_exp(delta.tail<3>()), delta.head<3>()) * T;  // left update, as linearized
    if (delta.norm() < 1e-13) break;
  }
  if (degenerate) *degenerate = rank_deficient;
  return T;
}

// Per-scan sonar poses chained through keyframes. The first scan anchors the
// odometry frame. Scans with too few matches keep the previous pose and are
// flagged, as are rank-deficient alignments.
inline CoarseOdometryResult coarse_sonar_odometry(const std::vector<SonarScan>& scans,
                                                  const SonarFrontendConfig& cfg) {
  if (scans.size() < 2)
    throw std::invalid_argument("coarse_sonar_odometry: need at least 2 scans");
  CoarseOdometryResult out;
  out.poses.resize(scans.size());
  out.degenerate.assign(scans.size(), 0);

  std::vector<SurfaceFeature> key_feats = extract_features(scans[0], cfg);
  Pose T_key;  // identity: first scan is the anchor keyframe
  for (size_t i = 1; i < scans.size(); ++i) {
    const auto feats = extract_features(scans[i], cfg);
    Pose prior = T_key.inverse() * out.poses[i - 1];
    std::vector<FeatureMatch> inliers;
    bool solved = false;
    // re-associate once the estimate improves; the initial prior can be a full
    // frame step stale, which pairs some feature members one sample off
    for (int round = 0; round < 3; ++round) {
      const auto matches = associate(feats, key_feats, prior, cfg);
      std::vector<FeatureMatch> kept;
      if (matches.size() >= 3)
        kept = reject_outliers(matches, prior, cfg, mix_seed(9001, (i << 4) + round));
      if (kept.size() < 3) break;
      bool deg = false;
      const Pose rel = align_point_to_plane(kept, key_feats, prior, &deg);
      inliers = std::move(kept);
      solved = true;
      out.degenerate[i] = deg ? 1 : 0;
      const bool settled = pose_distance(rel, prior) < 1e-10;
      prior = rel;
      if (settled) break;
    }

    if (!solved) {
      out.poses[i] = out.poses[i - 1];
      out.degenerate[i] = 1;
    } else {
      out.poses[i] = T_key * prior;
    }

    const double overlap =
        feats.empty() ? 0.0 : static_cast<double>(inliers.size()) / static_cast<double>(feats.size());
    if (is_keyframe(out.poses[i], T_key, overlap, cfg)) {
      key_feats = feats;
      T_key = out.poses[i];
    }
  }
  return out;
}

struct HandEyeResult {
  Pose init;        // closed-form solution
  Pose calibrated;  // after nonlinear refinement
  double excitation = 0.0;
  double consistency_init = 0.0;     // mean ||log(X^-1 A^-1 X B)||
  double consistency_refined = 0.0;
};

namespace detail {

inline double hand_eye_consistency(const std::vector<Pose>& A, const std::vector<Pose>& B,
                                   const Pose& X) {
  double sum = 0.0;
  for (size_t i = 0; i < A.size(); ++i) {
    const Twist tw = (X.inverse() * A[i].inverse() * X * B[i]).log();
    sum += std::sqrt(tw.rot.squaredNorm() + tw.trans.squaredNorm());
  }
  return sum / static_cast<double>(A.size());
}

// Frobenius mismatch of the homogeneous relative-pose constraint, stacked over
// all pairs (the bottom matrix row is identically zero and skipped).
inline Eigen::VectorXd hand_eye_residual(const std::vector<Pose>& A, const std::vector<Pose>& B,
                                         const Pose& X) {
  Eigen::VectorXd r(12 * static_cast<int>(A.size()));
  const Mat4 Xm = X.matrix();
  for (size_t i = 0; i < A.size(); ++i) {
    const Mat4 D = A[i].matrix() * Xm - Xm * B[i].matrix();
    for (int row = 0; row < 3; ++row)
      for (int col = 0; col < 4; ++col) r(12 * i + 4 * row + col) = D(row, col);
  }
  return r;
}

}  // namespace detail

// Hand-eye solve of T_CC' * X = X * T_SoSo' over the pose streams: quaternion
// linear system for the rotation, linear least squares for the translation,
// then Gauss-Newton on the stacked homogeneous mismatch.
inline HandEyeResult coarse_calibrate(const PoseStreamPair& pairs) {
  if (pairs.T_WC.size() != pairs.T_So.size())
    throw std::invalid_argument("coarse_calibrate: stream lengths differ");
  const size_t n = pairs.T_WC.size();
  if (n < 4) throw std::invalid_argument("coarse_calibrate: need at least 3 relative pose pairs");

  std::vector<Pose> A, B;
  for (size_t i = 1; i < n; ++i) {
    A.push_back(pairs.T_WC[i - 1].inverse() * pairs.T_WC[i]);
    B.push_back(pairs.T_So[i - 1].inverse() * pairs.T_So[i]);
  }
  const size_t m = A.size();

  // rotation excitation: second singular value of the stacked rotation vectors
  Eigen::MatrixXd axes(m, 3);
  for (size_t i = 0; i < m; ++i) axes.row(i) = quat_log(A[i].q).transpose();
  const Eigen::JacobiSVD<Eigen::MatrixXd> axes_svd(axes);
  HandEyeResult out;
  out.excitation = axes_svd.singularValues()(1);
  if (out.excitation <= 0.1) throw std::runtime_error("coarse_calibrate: degenerate motion");

  // closed-form rotation: qA (x) qX - qX (x) qB = 0 stacked over pairs
  Eigen::MatrixXd Q(4 * m, 4);
  for (size_t i = 0; i < m; ++i)
    Q.block<4, 4>(4 * i, 0) = quat_left(A[i].q) - quat_right(B[i].q);
  const Eigen::JacobiSVD<Eigen::MatrixXd> q_svd(Q, Eigen::ComputeThinV);
  const Eigen::Vector4d qv = q_svd.matrixV().col(3);
  const Quat q_x = quat_canonical(Quat(qv(0), qv(1), qv(2), qv(3)));

  // translation: (R_A - I) t_X = R_X t_B - t_A
  Eigen::MatrixXd L(3 * m, 3);
  Eigen::VectorXd rhs(3 * m);
  const Mat3 R_x = q_x.toRotationMatrix();
  for (size_t i = 0; i < m; ++i) {
    L.block<3, 3>(3 * i, 0) = A[i].R() - Mat3::Identity();
    rhs.segment<3>(3 * i) = R_x * B[i].t - A[i].t;
  }
  const Vec3 t_x = L.colPivHouseholderQr().solve(rhs);
  out.init = Pose(q_x, t_x);

  // Gauss-Newton refinement of the stacked mismatch, finite-difference
  // Jacobian (6 parameters, tiny problem)
  Pose X = out.init;
  const double h = 1e-7;
  for (int it = 0; it < 30; ++it) {
    const Eigen::VectorXd r0 = detail::hand_eye_residual(A, B, X);
    Eigen::MatrixXd J(r0.size(), 6);
    for (int axis = 0; axis < 6; ++axis) {
      auto step = [&](double eps) {
        Pose Xp = X;
        if (axis < 3) {
          Xp.t[axis] += eps;
        } else {
          Vec3 dth = Vec3::Zero();
          dth[axis - 3] = eps;
          Xp.q = Xp.q * quat_exp(dth);
        }
        return detail::hand_eye_residual(A, B, Xp);
      };
      J.col(axis) = (step(h) - step(-h)) / (2 * h);
    }
    Mat6 H = J.transpose() * J;
    H.diagonal().array() += 1e-14 * H.trace();
    const Vec6 delta = H.ldlt().solve(-J.transpose() * r0);
    const Pose X_new(X.q * quat_exp(delta.tail<3>()), X.t + delta.head<3>());
    if (detail::hand_eye_residual(A, B, X_new).squaredNorm() <= r0.squaredNorm()) X = X_new;
    if (delta.norm() < 1e-13) break;
  }
  out.calibrated = X;
  out.consistency_init = detail::hand_eye_consistency(A, B, out.init);
  out.consistency_refined = detail::hand_eye_consistency(A, B, X);
  return out;
}

struct RefineResult {
  Pose refined;  // T_CSo
  Pose T_P2P;
  int correspondences = 0;
  double mean_dist_before = 0.0;  // nearest-landmark distance of the selected cloud
  double mean_dist_after = 0.0;
  int iterations = 0;
};

// Registers the sonar cloud (taken to the world frame with the coarse
// extrinsic) against camera landmarks: iterated nearest-landmark
// correspondence within radius mu + closed-form alignment, then composes the
// correction into the extrinsic.
inline RefineResult refine_calibrate(const Pose& coarse, const std::vector<Vec3>& landmarks,
                                     const SonarScan& scan, const Pose& T_WC, double mu) {
  if (landmarks.empty() || scan.points.empty())
    throw std::runtime_error("refine_calibrate: insufficient overlap");
  std::vector<Vec3> cloud(scan.points.size());
  for (size_t j = 0; j < scan.points.size(); ++j) cloud[j] = T_WC * (coarse * scan.points[j]);

  auto nearest = [&](const Vec3& x) {
    size_t best = 0;
    double d2 = (landmarks[0] - x).squaredNorm();
    for (size_t l = 1; l < landmarks.size(); ++l) {
      const double d = (landmarks[l] - x).squaredNorm();
      if (d < d2) {
        d2 = d;
        best = l;
      }
    }
    return std::make_pair(best, std::sqrt(d2));
  };

  RefineResult out;
  Pose T;  // identity
  std::vector<size_t> initial_subset;
  for (int it = 0; it < 30; ++it) {
    std::vector<Vec3> src, dst;
    double dist_sum = 0.0;
    std::vector<size_t> subset;
    for (size_t j = 0; j < cloud.size(); ++j) {
      const auto [l, d] = nearest(T * cloud[j]);
      if (d >= mu) continue;
      subset.push_back(j);
      src.push_back(cloud[j]);
      dst.push_back(landmarks[l]);
      dist_sum += d;
    }
    if (it == 0) {
      if (subset.size() < 3) throw std::runtime_error("refine_calibrate: insufficient overlap");
      initial_subset = subset;
      out.mean_dist_before = dist_sum / static_cast<double>(subset.size());
    }
    if (subset.size() < 3) break;
    out.correspondences = static_cast<int>(subset.size());
    const Pose T_new = rigid_align(src, dst);
    out.iterations = it + 1;
    const bool converged = pose_distance(T_new, T) < 1e-8;
    T = T_new;
    if (converged) break;
  }

  out.T_P2P = T;
  out.refined = T_WC.inverse() * T * T_WC * coarse;
  double after = 0.0;
  for (size_t j : initial_subset) after += nearest(T * cloud[j]).second;
  out.mean_dist_after = after / static_cast<double>(initial_subset.size());
  return out;
}

struct OverlayPoint {
  Vec2 px = Vec2::Zero();
  double range = 0.0;
};

// Sonar points inside the camera frustum, as pixels with range for
// colour-coding. The qualitative "do the returns land on the imaged surface"
// calibration check.
inline std::vector<OverlayPoint> backproject_overlay(const SonarScan& scan, const Pose& T_CSo,
                                                     const CameraIntrinsics& intr) {
  std::vector<OverlayPoint> out;
  for (const Vec3& p : scan.points) {
    const Vec3 p_c = T_CSo * p;
    const auto px = project_pinhole(intr, p_c);
    if (!px) continue;
    if (px->x() < 0 || px->y() < 0 || px->x() > intr.width - 1 || px->y() > intr.height - 1)
      continue;
    out.push_back(OverlayPoint{*px, p.norm()});
  }
  return out;
}

inline void overlay_csv(const std::string& path, const std::vector<OverlayPoint>& pts) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("overlay_csv: cannot write " + path);
  f << "u,v,range\n";
  char buf[128];
  for (const OverlayPoint& p : pts) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g\n", p.px.x(), p.px.y(), p.range);
    f << buf;
  }
}

struct CalibResult {
  Pose coarse;
  Pose refined;
  bool has_refined = false;
  double excitation = 0.0;
  double consistency_init = 0.0;
  double consistency_refined = 0.0;
  int refine_correspondences = 0;
  double refine_mean_dist_before = 0.0;
  double refine_mean_dist_after = 0.0;
};

inline void save_calib_report(const std::string& path, const CalibResult& r) {
  Config cfg;
  cfg.set_pose("coarse_t_cso", r.coarse);
  if (r.has_refined) cfg.set_pose("refined_t_cso", r.refined);
  char buf[64];
  auto put = [&](const char* k, double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    cfg.set(k, buf);
  };
  put("excitation_rad", r.excitation);
  put("consistency_init", r.consistency_init);
  put("consistency_refined", r.consistency_refined);
  cfg.set("refine_correspondences", std::to_string(r.refine_correspondences));
  put("refine_mean_dist_before", r.refine_mean_dist_before);
  put("refine_mean_dist_after", r.refine_mean_dist_after);
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_calib_report: cannot write " + path);
  f << cfg.serialize();
}

inline CalibResult load_calib_report(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_calib_report: cannot read " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const Config cfg = Config::parse(text);
  CalibResult r;
  r.coarse = cfg.get_pose("coarse_t_cso");
  r.has_refined = cfg.has("refined_t_cso");
  if (r.has_refined) r.refined = cfg.get_pose("refined_t_cso");
  r.excitation = cfg.get_double("excitation_rad");
  r.consistency_init = cfg.get_double("consistency_init");
  r.consistency_refined = cfg.get_double("consistency_refined");
  r.refine_correspondences = cfg.get_int("refine_correspondences");
  r.refine_mean_dist_before = cfg.get_double("refine_mean_dist_before");
  r.refine_mean_dist_after = cfg.get_double("refine_mean_dist_after");
  return r;
}

}  // namespace fathom
