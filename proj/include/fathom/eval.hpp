#pragma once

// Trajectory evaluation: nearest-timestamp matching, closed-form SE(3)
// alignment, translation/rotation RMSE, and per-interval error statistics.

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fathom/dataset.hpp"
#include "fathom/geom.hpp"

namespace fathom {

using PoseTrack = std::vector<std::pair<double, Pose>>;

struct MatchedPose {
  double t = 0.0;
  Pose est;
  Pose ref;
};

namespace detail {

// Pairs every estimate pose with the nearest reference timestamp, discarding
// pairs further apart than half the estimate's own frame interval.
inline std::vector<MatchedPose> match_tracks(const PoseTrack& est, const PoseTrack& ref) {
  std::vector<MatchedPose> out;
  if (est.empty() || ref.empty()) return out;

  double max_gap = std::numeric_limits<double>::infinity();
  if (est.size() >= 2) {
    std::vector<double> dts;
    dts.reserve(est.size() - 1);
    for (std::size_t i = 1; i < est.size(); ++i) dts.push_back(est[i].first - est[i - 1].first);
    std::sort(dts.begin(), dts.end());
    max_gap = 0.5 * dts[dts.size() / 2];
  }

  std::vector<double> ref_t(ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) ref_t[i] = ref[i].first;

  for (const auto& [t, pose] : est) {
    const auto it = std::lower_bound(ref_t.begin(), ref_t.end(), t);
    std::size_t best = std::min<std::size_t>(it - ref_t.begin(), ref.size() - 1);
    if (it != ref_t.begin()) {
      const std::size_t prev = (it - ref_t.begin()) - 1;
      if (std::abs(ref_t[prev] - t) < std::abs(ref_t[best] - t)) best = prev;
    }
    if (std::abs(ref_t[best] - t) <= max_gap + 1e-12)
      out.push_back({t, pose, ref[best].second});
  }
  return out;
}

// Type-7 quantile (linear interpolation between order statistics).
inline double quantile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) return 0.0;
  const double x = p * (sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(x));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (x - lo) * (sorted[hi] - sorted[lo]);
}

}  // namespace detail

// Closed-form SE(3) alignment (no scale) minimizing squared position error of
// alignment * est against ref over temporally matched pairs.
inline Pose align(const PoseTrack& est, const PoseTrack& ref) {
  const auto matches = detail::match_tracks(est, ref);
  if (matches.size() < 3)
    throw std::invalid_argument("align: need at least 3 temporally matched poses, have " +
                                std::to_string(matches.size()));

  std::vector<Vec3> src(matches.size()), dst(matches.size());
  for (std::size_t i = 0; i < matches.size(); ++i) {
    src[i] = matches[i].est.t;
    dst[i] = matches[i].ref.t;
  }
  return rigid_align(src, dst);
}

struct IntervalBox {
  double t_begin = 0.0;
  double t_end = 0.0;
  int count = 0;
  double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
};

struct EvalReport {
  int matched = 0;
  double translation_rmse = 0.0;     // metres
  double rotation_rmse_deg = 0.0;    // geodesic angle, degrees
  double interval_s = 20.0;
  std::vector<IntervalBox> boxes;    // translation error per time interval
  Pose alignment;
};

inline EvalReport rmse(const PoseTrack& est, const PoseTrack& ref, const Pose& alignment,
                       double interval_s = 20.0) {
  const auto matches = detail::match_tracks(est, ref);
  if (matches.empty()) throw std::invalid_argument("rmse: no temporally matched poses");

  EvalReport rep;
  rep.matched = static_cast<int>(matches.size());
  rep.interval_s = interval_s;
  rep.alignment = alignment;

  std::vector<double> terr(matches.size());
  double sum_t2 = 0.0, sum_r2 = 0.0;
  for (std::size_t i = 0; i < matches.size(); ++i) {
    const MatchedPose& m = matches[i];
    terr[i] = (alignment * m.est.t - m.ref.t).norm();
    const double ang = rad2deg(rotation_angle(alignment.q * m.est.q, m.ref.q));
    sum_t2 += terr[i] * terr[i];
    sum_r2 += ang * ang;
  }
  rep.translation_rmse = std::sqrt(sum_t2 / matches.size());
  rep.rotation_rmse_deg = std::sqrt(sum_r2 / matches.size());

  const double t0 = matches.front().t;
  const double span = matches.back().t - t0;
  const double iw = std::max(interval_s, 1e-9);
  const int n_int = std::max(1, static_cast<int>(std::ceil(span / iw)));
  std::vector<std::vector<double>> buckets(n_int);
  for (std::size_t i = 0; i < matches.size(); ++i) {
    const int k = std::min(static_cast<int>(std::floor((matches[i].t - t0) / iw)), n_int - 1);
    buckets[std::max(k, 0)].push_back(terr[i]);
  }
  for (int k = 0; k < n_int; ++k) {
    if (buckets[k].empty()) continue;
    std::sort(buckets[k].begin(), buckets[k].end());
    IntervalBox box;
    box.t_begin = t0 + k * iw;
    box.t_end = t0 + (k + 1) * iw;
    box.count = static_cast<int>(buckets[k].size());
    box.min = buckets[k].front();
    box.q1 = detail::quantile(buckets[k], 0.25);
    box.median = detail::quantile(buckets[k], 0.5);
    box.q3 = detail::quantile(buckets[k], 0.75);
    box.max = buckets[k].back();
    rep.boxes.push_back(box);
  }
  return rep;
}

inline std::string report_text(const EvalReport& rep) {
  std::ostringstream os;
  os << "matched_poses = " << rep.matched << "\n"
     << "translation_rmse_m = " << format_double(rep.translation_rmse) << "\n"
     << "rotation_rmse_deg = " << format_double(rep.rotation_rmse_deg) << "\n"
     << "interval_s = " << format_double(rep.interval_s) << "\n"
     << "alignment = " << format_double(rep.alignment.q.w()) << " "
     << format_double(rep.alignment.q.x()) << " " << format_double(rep.alignment.q.y()) << " "
     << format_double(rep.alignment.q.z()) << " " << format_double(rep.alignment.t.x()) << " "
     << format_double(rep.alignment.t.y()) << " " << format_double(rep.alignment.t.z()) << "\n";
  for (const IntervalBox& b : rep.boxes)
    os << "interval " << format_double(b.t_begin) << " " << format_double(b.t_end) << " " << b.count
       << " " << format_double(b.min) << " " << format_double(b.q1) << " "
       << format_double(b.median) << " " << format_double(b.q3) << " " << format_double(b.max)
       << "\n";
  return os.str();
}

inline std::string report_csv(const EvalReport& rep) {
  std::ostringstream os;
  os << "t_begin,t_end,count,min,q1,median,q3,max\n";
  for (const IntervalBox& b : rep.boxes)
    os << format_double(b.t_begin) << "," << format_double(b.t_end) << "," << b.count << ","
       << format_double(b.min) << "," << format_double(b.q1) << "," << format_double(b.median)
       << "," << format_double(b.q3) << "," << format_double(b.max) << "\n";
  return os.str();
}

}  // namespace fathom
