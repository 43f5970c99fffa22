#pragma once

// Sliding-window joint optimization over camera, IMU, and sonar residuals.
// Normal equations are ordered states-then-landmarks; landmarks are eliminated
// with a Schur complement before the damped state solve.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "fathom/core.hpp"
#include "fathom/geom.hpp"
#include "fathom/imu.hpp"
#include "fathom/sonar_frontend.hpp"
#include "fathom/visual_frontend.hpp"

namespace fathom {

struct WindowKeyframe {
  int id = 0;
  double t = 0.0;
  RobotState state;
  std::vector<Observation> observations;    // camera, both eyes
  std::vector<SurfaceFeature> features;     // sonar features, sonar frame
  std::vector<FeatureMatch> matches;        // sonar matches into earlier keyframes
  std::optional<PreintegratedImu> to_next;  // exactly one per consecutive pair
};

struct SlidingWindow {
  std::size_t capacity = 10;
  std::vector<WindowKeyframe> frames;

  int index_of(int keyframe_id) const {
    for (std::size_t i = 0; i < frames.size(); ++i)
      if (frames[i].id == keyframe_id) return static_cast<int>(i);
    return -1;
  }
};

enum class ResidualKind { kCamera, kImu, kSonar };

inline const char* kind_name(ResidualKind k) {
  switch (k) {
    case ResidualKind::kCamera: return "camera";
    case ResidualKind::kImu: return "imu";
    default: return "sonar";
  }
}

// One term of the joint cost. state_a is the camera observer, the earlier IMU
// state, or the sonar match's keyframe; state_b the later IMU state or the
// sonar match's observing frame. huber is the robust threshold on the whitened
// residual norm (0 = plain quadratic).
struct ResidualBlock {
  ResidualKind kind = ResidualKind::kCamera;
  int state_a = -1;
  int state_b = -1;
  int cam = 0;
  int landmark = -1;
  Vec2 pixel = Vec2::Zero();
  Vec3 p_k = Vec3::Zero();
  Vec3 p_i = Vec3::Zero();
  int preint = -1;  // index into Problem::preints
  Eigen::MatrixXd info;
  double huber = 0.0;
};

struct SolverConfig {
  double sigma_px = 1.0;       // camera information = sigma_px^-2 I2
  double sigma_so = 0.05;      // sonar information = sigma_so^-2 I3
  double sigma_bw_rw = 1e-4;   // gyro bias random walk
  double sigma_ba_rw = 1e-3;   // accel bias random walk
  double huber_px = 1.0;       // pixels
  double huber_so = 0.1;       // metres
  bool use_camera = true;
  bool use_imu = true;
  bool use_sonar = true;
  int max_iterations = 50;
  double gradient_tol = 1e-10;
  double rel_cost_tol = 1e-10;
  double lambda_init = 1e-6;
};

struct Problem {
  std::vector<RobotState> states;
  std::vector<double> stamps;
  std::vector<int> landmark_ids;
  std::vector<Vec3> landmark_positions;
  std::map<int, int> landmark_index;
  std::vector<PreintegratedImu> preints;
  std::vector<ResidualBlock> blocks;
  Pose T_C0I;  // body -> left camera
  Pose T_ISo;  // sonar -> body
  CameraIntrinsics intr;
  Vec3 gravity = gravity_w();
  int fixed_state = 0;  // pose gauge anchor; -1 frees everything

  int num_free_states() const {
    return static_cast<int>(states.size()) - (fixed_state >= 0 ? 1 : 0);
  }
};

struct SolveReport {
  int iterations = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  bool converged = false;
  double cost_camera = 0.0;
  double cost_imu = 0.0;
  double cost_sonar = 0.0;
  double wall_ms = 0.0;
};

inline std::string report_line(double t, const SolveReport& r) {
  char buf[320];
  std::snprintf(buf, sizeof(buf), "%.17g,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.3f,%d", t,
                r.iterations, r.initial_cost, r.final_cost, r.cost_camera, r.cost_imu,
                r.cost_sonar, r.wall_ms, r.converged ? 1 : 0);
  return buf;
}

inline Problem build_problem(const SlidingWindow& window, const LandmarkStore& store,
                             const Pose& T_C0I, const Pose& T_ISo, const CameraIntrinsics& intr,
                             const SolverConfig& cfg) {
  if (window.frames.empty()) throw std::invalid_argument("build_problem: empty window");
  Problem pb;
  pb.T_C0I = T_C0I;
  pb.T_ISo = T_ISo;
  pb.intr = intr;
  for (const WindowKeyframe& f : window.frames) {
    pb.states.push_back(f.state);
    pb.stamps.push_back(f.t);
  }

  if (cfg.use_imu) {
    for (std::size_t k = 0; k + 1 < window.frames.size(); ++k) {
      if (!window.frames[k].to_next)
        throw std::invalid_argument("build_problem: missing preintegration between keyframes");
      ResidualBlock b;
      b.kind = ResidualKind::kImu;
      b.state_a = static_cast<int>(k);
      b.state_b = static_cast<int>(k + 1);
      b.preint = static_cast<int>(pb.preints.size());
      pb.preints.push_back(*window.frames[k].to_next);
      b.info = imu_information(pb.preints.back(), cfg.sigma_bw_rw, cfg.sigma_ba_rw);
      pb.blocks.push_back(std::move(b));
    }
  }

  if (cfg.use_camera) {
    const Eigen::Matrix2d info_c = Eigen::Matrix2d::Identity() / (cfg.sigma_px * cfg.sigma_px);
    for (std::size_t k = 0; k < window.frames.size(); ++k) {
      for (const Observation& o : window.frames[k].observations) {
        if (!store.has(o.landmark_id)) continue;
        if (!pb.landmark_index.count(o.landmark_id)) {
          pb.landmark_index[o.landmark_id] = static_cast<int>(pb.landmark_ids.size());
          pb.landmark_ids.push_back(o.landmark_id);
          pb.landmark_positions.push_back(store.get(o.landmark_id).p_w);
        }
        ResidualBlock b;
        b.kind = ResidualKind::kCamera;
        b.state_a = static_cast<int>(k);
        b.cam = o.cam;
        b.landmark = o.landmark_id;
        b.pixel = o.pixel;
        b.info = info_c;
        b.huber = cfg.huber_px / cfg.sigma_px;  // whitened units
        pb.blocks.push_back(std::move(b));
      }
    }
  }

  if (cfg.use_sonar) {
    const Mat3 info_s = Mat3::Identity() / (cfg.sigma_so * cfg.sigma_so);
    for (std::size_t i = 0; i < window.frames.size(); ++i) {
      for (const FeatureMatch& m : window.frames[i].matches) {
        const int k = window.index_of(m.keyframe_id);
        if (k < 0) continue;  // match target slid out of the window
        ResidualBlock b;
        b.kind = ResidualKind::kSonar;
        b.state_a = k;
        b.state_b = static_cast<int>(i);
        b.p_k = m.p_k;
        b.p_i = m.p_i;
        b.info = info_s;
        b.huber = cfg.huber_so / cfg.sigma_so;
        pb.blocks.push_back(std::move(b));
      }
    }
  }
  return pb;
}

namespace detail {

// Huber cost on the whitened squared norm s = r^T P r; delta in whitened units.
inline double huber_rho(double s, double delta) {
  if (delta <= 0.0) return s;
  const double d2 = delta * delta;
  if (s <= d2) return s;
  return 2.0 * delta * std::sqrt(s) - d2;
}

inline double huber_weight(double s, double delta) {
  if (delta <= 0.0) return 1.0;
  const double d2 = delta * delta;
  if (s <= d2) return 1.0;
  return delta / std::sqrt(s);
}

inline Eigen::VectorXd block_residual(const Problem& pb, const std::vector<RobotState>& states,
                                      const std::vector<Vec3>& landmarks,
                                      const ResidualBlock& b) {
  switch (b.kind) {
    case ResidualKind::kCamera: {
      Observation obs;
      obs.cam = b.cam;
      obs.landmark_id = b.landmark;
      obs.pixel = b.pixel;
      const Pose T_CsI = camera_from_body(pb.T_C0I, pb.intr, b.cam);
      const Vec3& p_w = landmarks[static_cast<std::size_t>(pb.landmark_index.at(b.landmark))];
      return camera_residual(states[b.state_a], p_w, obs, T_CsI, pb.intr);
    }
    case ResidualKind::kImu:
      return imu_residual(states[b.state_a], states[b.state_b], pb.preints[b.preint], pb.gravity);
    default: {
      FeatureMatch m;
      m.p_k = b.p_k;
      m.p_i = b.p_i;
      const Pose T_k(states[b.state_a].q, states[b.state_a].p);
      const Pose T_i(states[b.state_b].q, states[b.state_b].p);
      return sonar_residual(T_k, T_i, pb.T_ISo, m);
    }
  }
}

struct CostBreakdown {
  double total = 0.0;
  double camera = 0.0;
  double imu = 0.0;
  double sonar = 0.0;
};

inline CostBreakdown evaluate_cost(const Problem& pb, const std::vector<RobotState>& states,
                                   const std::vector<Vec3>& landmarks) {
  CostBreakdown out;
  for (std::size_t idx = 0; idx < pb.blocks.size(); ++idx) {
    const ResidualBlock& b = pb.blocks[idx];
    const Eigen::VectorXd r = block_residual(pb, states, landmarks, b);
    if (!r.allFinite())
      throw std::runtime_error("solve: non-finite residual in block " + std::to_string(idx) +
                               " (" + kind_name(b.kind) + ")");
    const double s = r.dot(b.info * r);
    const double rho = huber_rho(s, b.huber);
    out.total += rho;
    switch (b.kind) {
      case ResidualKind::kCamera: out.camera += rho; break;
      case ResidualKind::kImu: out.imu += rho; break;
      default: out.sonar += rho; break;
    }
  }
  return out;
}

}  // namespace detail

// Levenberg-Marquardt on the robustified weighted SSE. Landmarks are
// eliminated per-point; the first keyframe pose is held fixed for gauge.
// States and landmark positions in the problem are updated in place.
inline SolveReport solve(Problem* pb, const SolverConfig& cfg) {
  const auto t_start = std::chrono::steady_clock::now();
  if (pb->num_free_states() < 1) throw std::invalid_argument("solve: no free states");

  for (std::size_t i = 0; i < pb->blocks.size(); ++i) {
    const Eigen::MatrixXd& info = pb->blocks[i].info;
    const double scale = std::max(1.0, info.cwiseAbs().maxCoeff());
    if (!info.allFinite() || (info - info.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale ||
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(info).eigenvalues().minCoeff() <=
            -1e-12 * scale)
      throw std::invalid_argument("solve: information matrix not positive definite (block " +
                                  std::to_string(i) + ")");
  }

  const int S = static_cast<int>(pb->states.size()) * 15;
  const int L = static_cast<int>(pb->landmark_ids.size()) * 3;

  std::vector<RobotState> states = pb->states;
  std::vector<Vec3> landmarks = pb->landmark_positions;

  detail::CostBreakdown cb = detail::evaluate_cost(*pb, states, landmarks);
  SolveReport rep;
  rep.initial_cost = cb.total;

  double lambda = cfg.lambda_init;
  Eigen::MatrixXd H_ss(S, S), H_sl(S, std::max(L, 1));
  Eigen::VectorXd g_s(S), g_l(std::max(L, 1));
  std::vector<Mat3> H_ll(pb->landmark_ids.size());

  for (int it = 0; it < cfg.max_iterations; ++it) {
    rep.iterations = it + 1;
    H_ss.setZero();
    H_sl.setZero();
    g_s.setZero();
    g_l.setZero();
    for (Mat3& h : H_ll) h.setZero();

    for (const ResidualBlock& b : pb->blocks) {
      switch (b.kind) {
        case ResidualKind::kCamera: {
          Observation obs;
          obs.cam = b.cam;
          obs.landmark_id = b.landmark;
          obs.pixel = b.pixel;
          const Pose T_CsI = camera_from_body(pb->T_C0I, pb->intr, b.cam);
          const int lj = pb->landmark_index.at(b.landmark);
          Eigen::Matrix<double, 2, 6> J_pose;
          Eigen::Matrix<double, 2, 3> J_lm;
          const Vec2 r = camera_residual_jacobians(states[b.state_a], landmarks[lj], obs, T_CsI,
                                                   pb->intr, &J_pose, &J_lm);
          const double s = r.dot(b.info * r);
          const Eigen::Matrix2d W = detail::huber_weight(s, b.huber) * b.info;
          const int sa = b.state_a * 15;
          H_ss.block<6, 6>(sa, sa) += J_pose.transpose() * W * J_pose;
          H_sl.block<6, 3>(sa, 3 * lj) += J_pose.transpose() * W * J_lm;
          H_ll[lj] += J_lm.transpose() * W * J_lm;
          g_s.segment<6>(sa) -= J_pose.transpose() * W * r;
          g_l.segment<3>(3 * lj) -= J_lm.transpose() * W * r;
          break;
        }
        case ResidualKind::kImu: {
          Mat15 J_k, J_k1;
          const Vec15 r = imu_residual_jacobians(states[b.state_a], states[b.state_b],
                                                 pb->preints[b.preint], pb->gravity, &J_k, &J_k1);
          const Eigen::MatrixXd& W = b.info;
          const int sa = b.state_a * 15, sb = b.state_b * 15;
          H_ss.block<15, 15>(sa, sa) += J_k.transpose() * W * J_k;
          H_ss.block<15, 15>(sb, sb) += J_k1.transpose() * W * J_k1;
          const Mat15 cross = J_k.transpose() * W * J_k1;
          H_ss.block<15, 15>(sa, sb) += cross;
          H_ss.block<15, 15>(sb, sa) += cross.transpose();
          g_s.segment<15>(sa) -= J_k.transpose() * W * r;
          g_s.segment<15>(sb) -= J_k1.transpose() * W * r;
          break;
        }
        default: {
          FeatureMatch m;
          m.p_k = b.p_k;
          m.p_i = b.p_i;
          const Pose T_k(states[b.state_a].q, states[b.state_a].p);
          const Pose T_i(states[b.state_b].q, states[b.state_b].p);
          Eigen::Matrix<double, 3, 6> J_k, J_i;
          const Vec3 r = sonar_residual_jacobians(T_k, T_i, pb->T_ISo, m, &J_k, &J_i);
          const double s = r.dot(b.info * r);
          const Mat3 W = detail::huber_weight(s, b.huber) * Mat3(b.info);
          const int sa = b.state_a * 15, sb = b.state_b * 15;
          H_ss.block<6, 6>(sa, sa) += J_k.transpose() * W * J_k;
          H_ss.block<6, 6>(sb, sb) += J_i.transpose() * W * J_i;
          const Eigen::Matrix<double, 6, 6> cross = J_k.transpose() * W * J_i;
          H_ss.block<6, 6>(sa, sb) += cross;
          H_ss.block<6, 6>(sb, sa) += cross.transpose();
          g_s.segment<6>(sa) -= J_k.transpose() * W * r;
          g_s.segment<6>(sb) -= J_i.transpose() * W * r;
          break;
        }
      }
    }

    // gauge: hold the anchor pose
    if (pb->fixed_state >= 0) {
      const int base = pb->fixed_state * 15;
      for (int d = base; d < base + 6; ++d) {
        H_ss.row(d).setZero();
        H_ss.col(d).setZero();
        if (L > 0) H_sl.row(d).setZero();
        H_ss(d, d) = 1.0;
        g_s(d) = 0.0;
      }
    }

    const double grad_inf = std::max(g_s.lpNorm<Eigen::Infinity>(),
                                     L > 0 ? g_l.lpNorm<Eigen::Infinity>() : 0.0);
    if (grad_inf < cfg.gradient_tol) {
      rep.converged = true;
      break;
    }

    bool accepted = false;
    while (lambda < 1e12) {
      Eigen::MatrixXd H_red = H_ss;
      Eigen::VectorXd g_red = g_s;
      for (int d = 0; d < S; ++d) H_red(d, d) += lambda * H_ss(d, d) + 1e-12;

      std::vector<Mat3> H_ll_inv(H_ll.size());
      for (std::size_t j = 0; j < H_ll.size(); ++j) {
        Mat3 hj = H_ll[j];
        hj.diagonal() += lambda * H_ll[j].diagonal();
        hj.diagonal().array() += 1e-12;
        H_ll_inv[j] = hj.inverse();
        const auto B = H_sl.middleCols<3>(3 * static_cast<int>(j));
        H_red.noalias() -= B * H_ll_inv[j] * B.transpose();
        g_red.noalias() -= B * (H_ll_inv[j] * g_l.segment<3>(3 * static_cast<int>(j)));
      }

      const Eigen::VectorXd dx = H_red.ldlt().solve(g_red);
      std::vector<RobotState> trial_states(states.size());
      for (std::size_t k = 0; k < states.size(); ++k)
        trial_states[k] = states[k].retract(dx.segment<15>(15 * static_cast<int>(k)));
      std::vector<Vec3> trial_landmarks = landmarks;
      for (std::size_t j = 0; j < H_ll.size(); ++j) {
        const auto B = H_sl.middleCols<3>(3 * static_cast<int>(j));
        const Vec3 dl =
            H_ll_inv[j] * (g_l.segment<3>(3 * static_cast<int>(j)) - B.transpose() * dx);
        trial_landmarks[j] += dl;
      }

      detail::CostBreakdown trial;
      bool valid = true;
      try {
        trial = detail::evaluate_cost(*pb, trial_states, trial_landmarks);
      } catch (const std::runtime_error&) {
        valid = false;  // e.g. a trial step pushed a landmark behind the camera
      }
      if (valid && trial.total <= cb.total) {
        const double drop = cb.total - trial.total;
        states = std::move(trial_states);
        landmarks = std::move(trial_landmarks);
        cb = trial;
        lambda = std::max(lambda / 3.0, 1e-12);
        accepted = true;
        if (drop < cfg.rel_cost_tol * std::max(cb.total, 1.0)) rep.converged = true;
        break;
      }
      lambda *= 4.0;
    }
    if (!accepted || rep.converged) break;
  }

  pb->states = states;
  pb->landmark_positions = landmarks;
  rep.final_cost = cb.total;
  rep.cost_camera = cb.camera;
  rep.cost_imu = cb.imu;
  rep.cost_sonar = cb.sonar;
  rep.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                          t_start)
                    .count();
  return rep;
}

// Removes the oldest non-anchor keyframe once the window exceeds capacity.
// The IMU segments on either side are merged by re-preintegrating over the
// union of their raw samples. Returns the landmark ids that were observed
// only by the removed frame (callers may prune their store).
inline std::vector<int> marginalize_or_drop(SlidingWindow* window) {
  if (window->frames.size() <= window->capacity) return {};
  if (window->frames.size() < 2) return {};

  const WindowKeyframe removed = window->frames[1];
  WindowKeyframe& anchor = window->frames[0];

  if (anchor.to_next && removed.to_next && anchor.to_next->samples.size() >= 2 &&
      removed.to_next->samples.size() >= 2) {
    std::vector<ImuSample> merged = anchor.to_next->samples;
    const std::vector<ImuSample>& tail = removed.to_next->samples;
    std::size_t start = 0;
    if (!merged.empty() && !tail.empty() &&
        std::abs(merged.back().t - tail.front().t) < 1e-12)
      start = 1;
    merged.insert(merged.end(), tail.begin() + static_cast<long>(start), tail.end());
    const PreintegratedImu& p0 = *anchor.to_next;
    anchor.to_next = preintegrate(merged, p0.bw_lin, p0.ba_lin, p0.sigma_g, p0.sigma_a);
  } else {
    anchor.to_next.reset();
  }

  window->frames.erase(window->frames.begin() + 1);
  for (WindowKeyframe& f : window->frames) {
    f.matches.erase(std::remove_if(f.matches.begin(), f.matches.end(),
                                   [&](const FeatureMatch& m) {
                                     return m.keyframe_id == removed.id;
                                   }),
                    f.matches.end());
  }

  std::vector<int> orphaned;
  for (const Observation& o : removed.observations) {
    bool seen = false;
    for (const WindowKeyframe& f : window->frames) {
      for (const Observation& q : f.observations)
        if (q.landmark_id == o.landmark_id) {
          seen = true;
          break;
        }
      if (seen) break;
    }
    if (!seen && std::find(orphaned.begin(), orphaned.end(), o.landmark_id) == orphaned.end())
      orphaned.push_back(o.landmark_id);
  }
  return orphaned;
}

}  // namespace fathom
