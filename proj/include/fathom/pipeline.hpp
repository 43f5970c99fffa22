#pragma once

// Per-frame orchestration: IMU propagation prior, sonar association against
// the window keyframes, visual tracking, keyframe promotion, window solve.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fathom/solver.hpp"

namespace fathom {

struct PipelineConfig {
  SonarFrontendConfig frontend;
  SolverConfig solver;
  std::size_t window_capacity = 10;
  double imu_sigma_g = 0.0;  // preintegration noise densities, from the dataset
  double imu_sigma_a = 0.0;
};

struct FrameInput {
  double t = 0.0;
  std::vector<ImuSample> imu;  // samples since the previous frame
  std::optional<CameraFrame> camera;
  std::optional<SonarScan> sonar;
};

struct FrameResult {
  bool keyframe = false;
  RobotState state;
  std::optional<SolveReport> report;
};

struct Pipeline {
  Pose T_C0I;  // body -> left camera
  Pose T_ISo;  // sonar -> body
  CameraIntrinsics intr;
  PipelineConfig cfg;

  SlidingWindow window;
  LandmarkStore store;
  std::vector<std::pair<double, Pose>> trajectory;  // per processed frame, T_WI
  std::vector<std::pair<double, SolveReport>> reports;

  Pipeline(const Pose& T_C0I_, const Pose& T_ISo_, const CameraIntrinsics& intr_,
           const PipelineConfig& cfg_, const RobotState& initial)
      : T_C0I(T_C0I_), T_ISo(T_ISo_), intr(intr_), cfg(cfg_), state_(initial) {
    window.capacity = cfg.window_capacity;
  }

  const RobotState& state() const { return state_; }

  FrameResult process_frame(const FrameInput& in) {
    for (const ImuSample& s : in.imu)
      if (buffer_.empty() || s.t > buffer_.back().t + 1e-12) buffer_.push_back(s);

    RobotState st = state_;
    if (!window.frames.empty()) {
      const RobotState& last = window.frames.back().state;
      st = last;
      if (buffer_.size() >= 2) {
        try {
          const PreintegratedImu pre =
              preintegrate(buffer_, last.bw, last.ba, cfg.imu_sigma_g, cfg.imu_sigma_a);
          st = propagate(last, pre, gravity_w());
        } catch (const std::exception& e) {
          throw std::runtime_error(std::string("process_frame[propagate]: ") + e.what());
        }
      }
    }

    // sonar association against every window keyframe
    std::vector<SurfaceFeature> feats;
    std::vector<FeatureMatch> matches;
    double overlap = 1.0;
    if (in.sonar) {
      try {
        feats = extract_features(*in.sonar, cfg.frontend);
        const Pose T_WSo_i = Pose(st.q, st.p) * T_ISo;
        overlap = 0.0;
        for (const WindowKeyframe& wf : window.frames) {
          if (wf.features.empty()) continue;
          const Pose T_WSo_k = Pose(wf.state.q, wf.state.p) * T_ISo;
          const Pose prior = T_WSo_k.inverse() * T_WSo_i;
          auto mm = associate(feats, wf.features, prior, cfg.frontend, wf.id);
          if (mm.size() >= 3)
            mm = reject_outliers(mm, prior, cfg.frontend,
                                 mix_seed(23, (frame_count_ << 8) + static_cast<std::uint64_t>(
                                                                        wf.id)));
          else
            mm.clear();
          if (&wf == &window.frames.back() && !feats.empty())
            overlap = static_cast<double>(mm.size()) / static_cast<double>(feats.size());
          matches.insert(matches.end(), mm.begin(), mm.end());
        }
        if (window.frames.empty()) overlap = 1.0;
      } catch (const std::exception& e) {
        throw std::runtime_error(std::string("process_frame[sonar]: ") + e.what());
      }
    }

    bool make_kf = window.frames.empty();
    if (!window.frames.empty()) {
      const WindowKeyframe& last = window.frames.back();
      make_kf = is_keyframe(Pose(st.q, st.p), Pose(last.state.q, last.state.p), overlap,
                            cfg.frontend);
    }
    ++frame_count_;

    if (!make_kf) {
      state_ = st;
      trajectory.emplace_back(in.t, Pose(st.q, st.p));
      return FrameResult{false, st, std::nullopt};
    }

    WindowKeyframe kf;
    kf.id = next_kf_id_++;
    kf.t = in.t;
    kf.state = st;
    kf.features = std::move(feats);
    kf.matches = std::move(matches);
    if (in.camera) {
      try {
        const Pose T_WC = Pose(st.q, st.p) * T_C0I.inverse();
        const TrackResult tr = track(*in.camera, kf.id, T_WC, intr, &store);
        kf.observations = tr.observations;
      } catch (const std::exception& e) {
        throw std::runtime_error(std::string("process_frame[track]: ") + e.what());
      }
    }

    if (!window.frames.empty()) {
      if (buffer_.size() < 2)
        throw std::runtime_error("process_frame[imu]: keyframe interval without imu samples");
      try {
        window.frames.back().to_next =
            preintegrate(buffer_, window.frames.back().state.bw, window.frames.back().state.ba,
                         cfg.imu_sigma_g, cfg.imu_sigma_a);
      } catch (const std::exception& e) {
        throw std::runtime_error(std::string("process_frame[imu]: ") + e.what());
      }
    }
    window.frames.push_back(std::move(kf));
    marginalize_or_drop(&window);

    std::optional<SolveReport> rep;
    if (window.frames.size() >= 2) {  // a lone anchor has no free states
      try {
        Problem pb = build_problem(window, store, T_C0I, T_ISo, intr, cfg.solver);
        rep = solve(&pb, cfg.solver);
        for (std::size_t k = 0; k < window.frames.size(); ++k)
          window.frames[k].state = pb.states[k];
        for (std::size_t j = 0; j < pb.landmark_ids.size(); ++j)
          store.get(pb.landmark_ids[j]).p_w = pb.landmark_positions[j];
      } catch (const std::exception& e) {
        throw std::runtime_error(std::string("process_frame[solve]: ") + e.what());
      }
    }

    state_ = window.frames.back().state;
    if (!buffer_.empty()) buffer_ = {buffer_.back()};
    trajectory.emplace_back(in.t, Pose(state_.q, state_.p));
    if (rep) reports.emplace_back(in.t, *rep);
    return FrameResult{true, state_, rep};
  }

 private:
  RobotState state_;
  std::vector<ImuSample> buffer_;  // samples since the last keyframe
  int next_kf_id_ = 0;
  std::uint64_t frame_count_ = 0;
};

}  // namespace fathom
