#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "featref/errors.hpp"
#include "featref/scene_model.hpp"

namespace featref {

struct ErrorSummary {
  std::size_t count = 0;
  double mean = 0.0;
  double median = 0.0;
  double max = 0.0;
};

inline ErrorSummary summarize(std::vector<double> errors) {
  ErrorSummary s;
  s.count = errors.size();
  if (errors.empty()) return s;
  std::sort(errors.begin(), errors.end());
  double total = 0.0;
  for (double e : errors) total += e;
  s.mean = total / static_cast<double>(errors.size());
  const std::size_t n = errors.size();
  s.median = n % 2 ? errors[n / 2] : 0.5 * (errors[n / 2 - 1] + errors[n / 2]);
  s.max = errors.back();
  return s;
}

// Area under the cumulative error curve up to `threshold`, normalized to
// [0, 1]. The curve starts at (0, 0) and steps by 1/n at each sorted error;
// integration is trapezoidal.
inline double error_auc(std::vector<double> errors, double threshold) {
  if (!(threshold > 0.0)) fail(ErrorCode::InvalidArgument, "AUC threshold must be positive");
  if (errors.empty()) return 0.0;
  std::sort(errors.begin(), errors.end());
  const double n = static_cast<double>(errors.size());
  double area = 0.0, prev_e = 0.0, prev_r = 0.0;
  for (std::size_t i = 0; i < errors.size(); ++i) {
    const double e = errors[i];
    const double r = static_cast<double>(i + 1) / n;
    if (e >= threshold) {
      area += (threshold - prev_e) * prev_r;  // curve is flat at prev_r until the threshold
      return area / threshold;
    }
    area += 0.5 * (prev_r + r) * (e - prev_e);
    prev_e = e;
    prev_r = r;
  }
  area += (threshold - prev_e) * prev_r;
  return area / threshold;
}

inline double rotation_error_deg(const Mat3& a, const Mat3& b) {
  const Mat3 d = a * b.transpose();
  const Vec3 axis(d(2, 1) - d(1, 2), d(0, 2) - d(2, 0), d(1, 0) - d(0, 1));
  return std::atan2(0.5 * axis.norm(), 0.5 * (d.trace() - 1.0)) * 180.0 / M_PI;
}

// Bounding-box diagonal of the point cloud.
inline double scene_diameter(const Reconstruction& recon) {
  if (recon.points().empty()) return 0.0;
  Vec3 lo = Vec3::Constant(INFINITY), hi = Vec3::Constant(-INFINITY);
  for (const auto& [id, p] : recon.points()) {
    lo = lo.cwiseMin(p.position);
    hi = hi.cwiseMax(p.position);
  }
  return (hi - lo).norm();
}

struct EvalOptions {
  std::vector<double> point_thresholds = {0.001, 0.002, 0.005, 0.01};  // fractions of the scene diameter
  std::vector<double> auc_thresholds = {0.5, 1.0, 2.0};                // pixels, keypoint error curve
  std::vector<double> pose_auc_thresholds = {0.01, 0.02, 0.05};        // fractions of the scene diameter
};

struct Ratio {
  double threshold = 0.0;
  double value = 0.0;
};

struct EvalReport {
  ErrorSummary keypoint_error;       // px, each keypoint vs its counterpart in the truth
  ErrorSummary track_consistency;    // px, pairwise transfer error inside refined tracks
  std::vector<Ratio> keypoint_auc;   // over keypoint_error
  double diameter = 0.0;             // of the truth point cloud
  std::vector<Ratio> accuracy;       // refined points near a truth point
  std::vector<Ratio> completeness;   // truth points near a refined point
  ErrorSummary rotation_error_deg;
  ErrorSummary translation_error;    // camera centre distance
  std::vector<Ratio> pose_auc;       // over translation_error
  std::optional<ErrorSummary> surface_error;  // px, when a surface oracle is given
};

// Pixel distance from the projection of P to the projection of the nearest
// surface point, averaged over the observing images (true poses).
using SurfaceProjector = std::function<Vec3(const Vec3&)>;

inline double surface_reprojection_error(const Reconstruction& truth, const Point3D& point,
                                         const SurfaceProjector& nearest_surface_point) {
  const Vec3 s = nearest_surface_point(point.position);
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& o : point.track) {
    const Image& img = truth.image(o.image_id);
    const Camera& cam = truth.camera(img.camera_id);
    if (!(img.pose.transform(point.position).z() > kMinDepth) || !(img.pose.transform(s).z() > kMinDepth)) continue;
    total += (project(img.pose, cam, point.position) - project(img.pose, cam, s)).norm();
    ++n;
  }
  return n ? total / static_cast<double>(n) : INFINITY;
}

inline std::vector<double> surface_reprojection_errors(const Reconstruction& estimate, const Reconstruction& truth,
                                                       const SurfaceProjector& nearest_surface_point) {
  std::vector<double> out;
  out.reserve(estimate.points().size());
  for (const auto& [id, p] : estimate.points()) out.push_back(surface_reprojection_error(truth, p, nearest_surface_point));
  return out;
}

namespace detail {

inline void check_ids(const Reconstruction& refined, const Reconstruction& truth) {
  if (refined.images().size() != truth.images().size())
    fail(ErrorCode::IdMismatch, "refined and truth models have different image sets");
  for (const auto& [id, img] : refined.images()) {
    auto it = truth.images().find(id);
    if (it == truth.images().end()) fail(ErrorCode::IdMismatch, "image " + std::to_string(id) + " missing in truth");
    if (it->second.keypoints.size() != img.keypoints.size())
      fail(ErrorCode::IdMismatch, "image " + std::to_string(id) + " has a different keypoint count in truth");
  }
}

inline double nearest_distance(const Vec3& p, const std::vector<Vec3>& set) {
  double best = INFINITY;
  for (const Vec3& q : set) best = std::min(best, (p - q).squaredNorm());
  return std::sqrt(best);
}

}  // namespace detail

// Transfer of a keypoint location between images through the true geometry.
using KeypointTransfer = std::function<Vec2(std::int64_t from, const Vec2& location, std::int64_t to)>;

inline EvalReport evaluate(const Reconstruction& refined, const Reconstruction& truth, const EvalOptions& opts = {},
                           const KeypointTransfer& transfer = {}, const SurfaceProjector& surface = {}) {
  detail::check_ids(refined, truth);
  EvalReport rep;

  std::vector<double> kp;
  for (const auto& [id, img] : refined.images())
    for (const auto& k : img.keypoints) kp.push_back((k.location - truth.keypoint(k.key()).location).norm());
  rep.keypoint_error = summarize(kp);
  for (double t : opts.auc_thresholds) rep.keypoint_auc.push_back({t, error_auc(kp, t)});

  if (transfer) {
    std::vector<double> pair;
    for (const auto& [id, p] : refined.points())
      for (std::size_t a = 0; a < p.track.size(); ++a)
        for (std::size_t b = 0; b < p.track.size(); ++b) {
          if (a == b) continue;
          const auto& u = p.track[a];
          const auto& v = p.track[b];
          pair.push_back((transfer(u.image_id, refined.keypoint(u.key()).location, v.image_id) -
                          refined.keypoint(v.key()).location)
                             .norm());
        }
    rep.track_consistency = summarize(pair);
  }

  rep.diameter = scene_diameter(truth);
  std::vector<Vec3> est, ref;
  for (const auto& [id, p] : refined.points()) est.push_back(p.position);
  for (const auto& [id, p] : truth.points()) ref.push_back(p.position);
  std::vector<double> acc, comp;
  for (const Vec3& p : est) acc.push_back(detail::nearest_distance(p, ref));
  for (const Vec3& p : ref) comp.push_back(detail::nearest_distance(p, est));
  for (double t : opts.point_thresholds) {
    const double d = t * rep.diameter;
    auto frac = [d](const std::vector<double>& v) {
      if (v.empty()) return 0.0;
      return static_cast<double>(std::count_if(v.begin(), v.end(), [d](double e) { return e <= d; })) /
             static_cast<double>(v.size());
    };
    rep.accuracy.push_back({t, frac(acc)});
    rep.completeness.push_back({t, frac(comp)});
  }

  std::vector<double> rot, trans;
  for (const auto& [id, img] : refined.images()) {
    const Pose& g = truth.image(id).pose;
    rot.push_back(rotation_error_deg(img.pose.rotation, g.rotation));
    trans.push_back((img.pose.center() - g.center()).norm());
  }
  rep.rotation_error_deg = summarize(rot);
  rep.translation_error = summarize(trans);
  for (double t : opts.pose_auc_thresholds)
    rep.pose_auc.push_back({t, rep.diameter > 0.0 ? error_auc(trans, t * rep.diameter) : 0.0});

  if (surface) rep.surface_error = summarize(surface_reprojection_errors(refined, truth, surface));
  return rep;
}

}  // namespace featref
