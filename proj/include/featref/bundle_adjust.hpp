#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "featref/errors.hpp"
#include "featref/feature_store.hpp"
#include "featref/keypoint_adjust.hpp"
#include "featref/parallel.hpp"
#include "featref/robust_optim.hpp"
#include "featref/scene_model.hpp"

namespace featref {

// ---------------------------------------------------------------------------
// Track references

struct TrackReference {
  std::int64_t point_id = 0;
  Eigen::VectorXd feature;
  NodeKey source;
};

// Observation closest to the robust mean of all observation features.
// Observations are processed in key order, so the result does not depend on
// the order they are given in.
inline TrackReference select_reference(std::int64_t point_id,
                                       std::vector<std::pair<NodeKey, Eigen::VectorXd>> observations,
                                       const RobustLoss& loss, int max_iterations = 20, double tolerance = 1e-6) {
  if (observations.empty()) fail(ErrorCode::EmptyTrack, "reference selection needs at least one observation");
  std::stable_sort(observations.begin(), observations.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<Eigen::VectorXd> feats;
  feats.reserve(observations.size());
  for (const auto& o : observations) feats.push_back(o.second);
  const Eigen::VectorXd mu = robust_mean(feats, loss, max_iterations, tolerance).mean;
  std::size_t best = 0;
  double best_d = (observations[0].second - mu).norm();
  for (std::size_t i = 1; i < observations.size(); ++i) {
    const double d = (observations[i].second - mu).norm();
    if (d < best_d || (d == best_d && observations[i].first < observations[best].first)) {
      best = i;
      best_d = d;
    }
  }
  return TrackReference{point_id, observations[best].second, observations[best].first};
}

using TrackReferences = std::map<std::int64_t, TrackReference>;

// References for every point from features interpolated at the current
// keypoint locations. Points without any usable observation are skipped.
inline TrackReferences select_references(const Reconstruction& recon, const FeaturePatchSet& patches,
                                         const RobustLoss& loss, int num_threads = 1) {
  std::vector<const Point3D*> points;
  for (const auto& [id, p] : recon.points()) points.push_back(&p);
  std::vector<std::optional<TrackReference>> out(points.size());
  parallel_for(points.size(), num_threads, [&](std::size_t i) {
    std::vector<std::pair<NodeKey, Eigen::VectorXd>> obs;
    for (const auto& o : points[i]->track) {
      const FeaturePatch& patch = patches.at(o.key());
      Eigen::VectorXd f(patch.channels);
      if (interpolate_grid(GridView::of(patch), recon.keypoint(o.key()).location, f.data(), nullptr, nullptr))
        obs.emplace_back(o.key(), f);
    }
    if (!obs.empty()) out[i] = select_reference(points[i]->point_id, obs, loss);
  });
  TrackReferences refs;
  for (auto& r : out)
    if (r) refs.emplace(r->point_id, std::move(*r));
  return refs;
}

// ---------------------------------------------------------------------------
// Cost maps: distance to the track reference on the patch grid plus spatial
// derivatives, interpolated with a Hermite bicubic spline.

struct CostMapPatch {
  std::int64_t image_id = 0;
  std::int64_t keypoint_id = 0;
  std::int64_t point_id = 0;
  int x0 = 0;
  int y0 = 0;
  int size = 0;
  std::vector<double> d, dx, dy, dxy;  // size * size, row-major

  NodeKey key() const { return NodeKey{image_id, keypoint_id}; }
  std::size_t index(int lx, int ly) const { return static_cast<std::size_t>(ly) * size + lx; }
};

namespace detail {

// Central differences, one-sided at the borders.
inline double grid_diff(const std::vector<double>& g, int S, int x, int y, bool along_x) {
  auto at = [&](int xx, int yy) { return g[static_cast<std::size_t>(yy) * S + xx]; };
  const int c = along_x ? x : y;
  const int lo = std::max(c - 1, 0), hi = std::min(c + 1, S - 1);
  const double a = along_x ? at(lo, y) : at(x, lo);
  const double b = along_x ? at(hi, y) : at(x, hi);
  return (b - a) / static_cast<double>(hi - lo);
}

inline void hermite_basis(double t, std::array<double, 4>& h, std::array<double, 4>& dh, std::array<double, 4>& ddh) {
  // Order: value at 0, value at 1, slope at 0, slope at 1.
  const double t2 = t * t, t3 = t2 * t;
  h = {2 * t3 - 3 * t2 + 1, -2 * t3 + 3 * t2, t3 - 2 * t2 + t, t3 - t2};
  dh = {6 * t2 - 6 * t, -6 * t2 + 6 * t, 3 * t2 - 4 * t + 1, 3 * t2 - 2 * t};
  ddh = {12 * t - 6, -12 * t + 6, 6 * t - 4, 6 * t - 2};
}

}  // namespace detail

inline CostMapPatch build_cost_map(const FeaturePatch& patch, const TrackReference& ref) {
  if (ref.feature.size() != patch.channels)
    fail(ErrorCode::InvalidArgument, "reference dimension differs from the patch");
  CostMapPatch cm;
  cm.image_id = patch.image_id;
  cm.keypoint_id = patch.keypoint_id;
  cm.point_id = ref.point_id;
  cm.x0 = patch.x0;
  cm.y0 = patch.y0;
  cm.size = patch.size;
  const int S = patch.size;
  const std::size_t n = static_cast<std::size_t>(S) * S;
  cm.d.resize(n);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const float* f = patch.node(x, y);
      double s = 0.0;
      for (int c = 0; c < patch.channels; ++c) {
        const double diff = static_cast<double>(f[c]) - ref.feature(c);
        s += diff * diff;
      }
      cm.d[cm.index(x, y)] = std::sqrt(s);
    }
  cm.dx.resize(n);
  cm.dy.resize(n);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      cm.dx[cm.index(x, y)] = detail::grid_diff(cm.d, S, x, y, true);
      cm.dy[cm.index(x, y)] = detail::grid_diff(cm.d, S, x, y, false);
    }
  cm.dxy.resize(n);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x)
      cm.dxy[cm.index(x, y)] =
          0.5 * (detail::grid_diff(cm.dx, S, x, y, false) + detail::grid_diff(cm.dy, S, x, y, true));
  return cm;
}

using CostMaps = std::map<NodeKey, CostMapPatch>;

// One cost map per observation of every referenced point.
inline CostMaps build_cost_maps(const Reconstruction& recon, const FeaturePatchSet& patches,
                                const TrackReferences& refs, int num_threads = 1) {
  std::vector<std::pair<NodeKey, const TrackReference*>> jobs;
  for (const auto& [id, p] : recon.points()) {
    auto it = refs.find(id);
    if (it == refs.end()) continue;
    for (const auto& o : p.track) jobs.emplace_back(o.key(), &it->second);
  }
  std::vector<CostMapPatch> maps(jobs.size());
  parallel_for(jobs.size(), num_threads,
               [&](std::size_t i) { maps[i] = build_cost_map(patches.at(jobs[i].first), *jobs[i].second); });
  CostMaps out;
  for (auto& m : maps) {
    const NodeKey k = m.key();
    out.emplace(k, std::move(m));
  }
  return out;
}

struct CostMapSample {
  double value = 0.0;
  Vec2 gradient = Vec2::Zero();
  Eigen::Matrix2d hessian = Eigen::Matrix2d::Zero();
};

// Hermite bicubic spline of d using stored node derivatives. False outside
// the node domain.
inline bool interpolate_cost_map(const CostMapPatch& cm, const Vec2& p, CostMapSample& out) {
  const GridView domain{nullptr, cm.x0, cm.y0, cm.size, cm.size, 1};
  if (!std::isfinite(p.x()) || !std::isfinite(p.y()) || !domain.contains(p)) return false;
  int cx, cy;
  double tx, ty;
  detail::locate(p.x(), cm.x0, cm.size, cx, tx);
  detail::locate(p.y(), cm.y0, cm.size, cy, ty);
  std::array<double, 4> hx, dhx, ddhx, hy, dhy, ddhy;
  detail::hermite_basis(tx, hx, dhx, ddhx);
  detail::hermite_basis(ty, hy, dhy, ddhy);
  out = CostMapSample{};
  for (int b = 0; b < 2; ++b)
    for (int a = 0; a < 2; ++a) {
      const std::size_t i = cm.index(cx + a, cy + b);
      // (x basis index, y basis index, coefficient)
      const std::array<std::tuple<int, int, double>, 4> terms{
          std::tuple{a, b, cm.d[i]}, std::tuple{2 + a, b, cm.dx[i]}, std::tuple{a, 2 + b, cm.dy[i]},
          std::tuple{2 + a, 2 + b, cm.dxy[i]}};
      for (const auto& [ix, iy, c] : terms) {
        out.value += c * hx[ix] * hy[iy];
        out.gradient.x() += c * dhx[ix] * hy[iy];
        out.gradient.y() += c * hx[ix] * dhy[iy];
        out.hessian(0, 0) += c * ddhx[ix] * hy[iy];
        out.hessian(0, 1) += c * dhx[ix] * dhy[iy];
        out.hessian(1, 1) += c * hx[ix] * ddhy[iy];
      }
    }
  out.hessian(1, 0) = out.hessian(0, 1);
  return true;
}

// ---------------------------------------------------------------------------
// Bundle adjustment

enum class BAMode { Exact, CostMap };
enum class PoseHandling { AllFixed, AllFree, Subset };

inline std::string to_string(BAMode m) { return m == BAMode::Exact ? "exact" : "costmap"; }

inline LMOptions default_ba_lm_options() {
  LMOptions o;
  o.max_iterations = 30;
  o.parameter_tolerance = 1e-4;
  return o;
}

inline constexpr double kGeometricCauchyScale = 1.0;  // pixels

struct BAOptions {
  BAMode mode = BAMode::Exact;
  RobustLoss loss = RobustLoss::cauchy(kDefaultCauchyScale);
  RobustLoss geometric_loss = RobustLoss::cauchy(kGeometricCauchyScale);
  LMOptions lm = default_ba_lm_options();
  PoseHandling poses = PoseHandling::AllFixed;
  std::set<std::int64_t> free_images;  // PoseHandling::Subset
  bool fix_gauge = true;
  int num_threads = 1;
};

struct DroppedObservation {
  NodeKey key;
  std::int64_t point_id = 0;
  int iteration = 0;
};

struct BAReport {
  BAMode mode = BAMode::Exact;
  LMSummary summary;
  std::size_t num_observations = 0;
  std::vector<DroppedObservation> dropped;
  std::vector<std::int64_t> underdetermined_points;  // fewer than two observations
  std::vector<std::int64_t> fixed_images;
  std::optional<std::pair<std::int64_t, int>> fixed_translation;  // (image, coordinate)
};

namespace detail {

inline std::vector<double> pose_values(const Pose& p) {
  std::vector<double> v(12);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) v[static_cast<std::size_t>(3 * r + c)] = p.rotation(r, c);
  for (int i = 0; i < 3; ++i) v[static_cast<std::size_t>(9 + i)] = p.translation(i);
  return v;
}

inline Pose pose_from(const double* v) {
  Pose p;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) p.rotation(r, c) = v[3 * r + c];
  p.translation = Vec3(v[9], v[10], v[11]);
  return p;
}

inline void pose_plus(const double* x, const double* delta, double* out) {
  const Pose p = pose_from(x).retract(Eigen::Map<const Eigen::Matrix<double, 6, 1>>(delta));
  const auto v = pose_values(p);
  std::copy(v.begin(), v.end(), out);
}

struct BlockLayout {
  std::map<std::int64_t, int> pose_block;
  std::map<std::int64_t, int> point_block;
  std::vector<std::pair<NodeKey, std::int64_t>> residual_obs;  // residual index -> (observation, point)
};

// Adds pose and point blocks, applying the pose handling and gauge rules.
inline BlockLayout add_blocks(LMProblem& problem, const Reconstruction& recon, const BAOptions& opts,
                              BAReport& report) {
  BlockLayout layout;
  std::vector<std::int64_t> free;
  for (const auto& [id, img] : recon.images()) {
    layout.pose_block[id] =
        problem.add_parameter_block(pose_values(img.pose), BlockRole::Camera, 6, PlusFunction(pose_plus));
    const bool is_free = opts.poses == PoseHandling::AllFree ||
                         (opts.poses == PoseHandling::Subset && opts.free_images.count(id));
    if (is_free) {
      free.push_back(id);
    } else {
      problem.set_constant(layout.pose_block[id]);
      report.fixed_images.push_back(id);
    }
  }
  const std::size_t constant = recon.images().size() - free.size();
  if (!free.empty() && constant < 2) {
    if (!opts.fix_gauge)
      fail(ErrorCode::GaugeUnderconstrained, "free poses need a gauge: fix at least two poses or enable fix_gauge");
    std::size_t next = 0;
    if (constant == 0) {
      problem.set_constant(layout.pose_block[free[0]]);
      report.fixed_images.push_back(free[0]);
      next = 1;
    }
    if (next < free.size()) {
      // Fix the translation coordinate most sensitive to scale about the anchor.
      const std::int64_t anchor = report.fixed_images.front();
      const std::int64_t second = free[next];
      const Pose& p2 = recon.image(second).pose;
      const Vec3 lever = p2.rotation * (recon.image(second).pose.center() - recon.image(anchor).pose.center());
      int k = 0;
      lever.cwiseAbs().maxCoeff(&k);
      problem.set_fixed_coordinates(layout.pose_block[second], {3 + k});
      report.fixed_translation = std::pair{second, k};
    }
  }
  for (const auto& [id, p] : recon.points()) {
    layout.point_block[id] = problem.add_parameter_block({p.position.x(), p.position.y(), p.position.z()},
                                                         BlockRole::Point);
    if (p.track.size() < 2) report.underdetermined_points.push_back(id);
  }
  return layout;
}

// Residual from a feature-space target at the projection.
template <typename Sampler>
ResidualFunction projection_residual(const Camera* camera, int dim, Sampler sampler) {
  return [camera, dim, sampler](std::span<const double* const> x, double* r, std::span<double* const> J) {
    const Pose pose = pose_from(x[0]);
    const Vec3 P(x[1][0], x[1][1], x[1][2]);
    if (!(pose.transform(P).z() > kMinDepth)) return EvalStatus::Invalid;
    const ProjectionJacobians pj = project_with_jacobians(pose, *camera, P);
    Eigen::MatrixXd G(dim, 2);
    if (!sampler(pj.pixel, r, G)) return EvalStatus::Invalid;
    if (J.empty()) return EvalStatus::Ok;
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    if (J[0]) Eigen::Map<RowMat>(J[0], dim, 6) = G * pj.d_pose;
    if (J[1]) Eigen::Map<RowMat>(J[1], dim, 3) = G * pj.d_point;
    return EvalStatus::Ok;
  };
}

// F[pi(P)] - f for a fixed reference feature.
inline ResidualFunction exact_residual(const Camera* camera, const FeaturePatch* patch, Eigen::VectorXd target) {
  if (target.size() != patch->channels) fail(ErrorCode::InvalidArgument, "reference dimension differs from the patch");
  auto sampler = [patch, target = std::move(target)](const Vec2& px, double* r, Eigen::MatrixXd& G) {
    const int D = patch->channels;
    std::vector<double> buf(static_cast<std::size_t>(3 * D));
    if (!interpolate_grid(GridView::of(*patch), px, buf.data(), buf.data() + D, buf.data() + 2 * D)) return false;
    for (int c = 0; c < D; ++c) {
      r[c] = buf[static_cast<std::size_t>(c)] - target(c);
      G(c, 0) = buf[static_cast<std::size_t>(D + c)];
      G(c, 1) = buf[static_cast<std::size_t>(2 * D + c)];
    }
    return true;
  };
  return projection_residual(camera, patch->channels, std::move(sampler));
}

// (d, dd/dx, dd/dy) of the cost-map spline at the projection.
inline ResidualFunction costmap_residual(const Camera* camera, const CostMapPatch* cm) {
  auto sampler = [cm](const Vec2& px, double* r, Eigen::MatrixXd& G) {
    CostMapSample s;
    if (!interpolate_cost_map(*cm, px, s)) return false;
    r[0] = s.value;
    r[1] = s.gradient.x();
    r[2] = s.gradient.y();
    G.row(0) = s.gradient.transpose();
    G.bottomRows<2>() = s.hessian;
    return true;
  };
  return projection_residual(camera, 3, std::move(sampler));
}

inline ResidualFunction reprojection_residual(const Camera* camera, const Vec2& target) {
  auto sampler = [target](const Vec2& px, double* r, Eigen::MatrixXd& G) {
    r[0] = px.x() - target.x();
    r[1] = px.y() - target.y();
    G.setIdentity();
    return true;
  };
  return projection_residual(camera, 2, std::move(sampler));
}

inline void write_back(Reconstruction& recon, const LMProblem& problem, const BlockLayout& layout) {
  for (const auto& [id, b] : layout.pose_block)
    if (!problem.parameter_block(b).constant) recon.set_pose(id, pose_from(problem.values(b).data()));
  for (const auto& [id, b] : layout.point_block) {
    const auto& v = problem.values(b);
    recon.set_point_position(id, Vec3(v[0], v[1], v[2]));
  }
}

inline void collect_dropped(const LMSummary& s, const BlockLayout& layout, BAReport& report) {
  for (const auto& d : s.deactivated)
    report.dropped.push_back(DroppedObservation{layout.residual_obs[d.residual].first,
                                                layout.residual_obs[d.residual].second, d.iteration});
}

inline LMOptions solver_options(const BAOptions& opts) {
  LMOptions lm = opts.lm;
  lm.num_threads = opts.num_threads;
  return lm;
}

}  // namespace detail

// Featuremetric BA against fixed per-point references. Observations whose
// projection leaves the patch are dropped for the rest of the run. Points
// without a reference are held constant. Updates recon in place.
inline BAReport featuremetric_ba(Reconstruction& recon, const FeaturePatchSet& patches, const TrackReferences& refs,
                                 const BAOptions& opts, const CostMaps* cost_maps = nullptr) {
  BAReport report;
  report.mode = opts.mode;
  CostMaps owned;
  if (opts.mode == BAMode::CostMap && !cost_maps) {
    owned = build_cost_maps(recon, patches, refs, opts.num_threads);
    cost_maps = &owned;
  }
  LMProblem problem;
  problem.set_invalid_policy(InvalidPolicy::Deactivate);
  detail::BlockLayout layout = detail::add_blocks(problem, recon, opts, report);
  for (const auto& [id, point] : recon.points()) {
    auto ref = refs.find(id);
    if (ref == refs.end()) {
      problem.set_constant(layout.point_block.at(id));
      continue;
    }
    for (const auto& obs : point.track) {
      const NodeKey key = obs.key();
      const Camera* camera = &recon.camera_of(obs.image_id);
      const std::vector<int> blocks{layout.pose_block.at(obs.image_id), layout.point_block.at(id)};
      if (opts.mode == BAMode::Exact) {
        const FeaturePatch* patch = &patches.at(key);
        problem.add_residual_block(blocks, patch->channels, opts.loss,
                                   detail::exact_residual(camera, patch, ref->second.feature));
      } else {
        auto it = cost_maps->find(key);
        if (it == cost_maps->end()) fail(ErrorCode::MissingPatch, "observation has no cost map");
        problem.add_residual_block(blocks, 3, opts.loss, detail::costmap_residual(camera, &it->second));
      }
      layout.residual_obs.emplace_back(key, id);
    }
  }
  report.num_observations = layout.residual_obs.size();
  report.summary = lm_solve(problem, detail::solver_options(opts));
  detail::collect_dropped(report.summary, layout, report);
  detail::write_back(recon, problem, layout);
  return report;
}

// Reprojection-error BA over the keypoint locations.
inline BAReport geometric_ba(Reconstruction& recon, const BAOptions& opts) {
  BAReport report;
  LMProblem problem;
  problem.set_invalid_policy(InvalidPolicy::Deactivate);
  detail::BlockLayout layout = detail::add_blocks(problem, recon, opts, report);
  for (const auto& [id, point] : recon.points())
    for (const auto& obs : point.track) {
      const Camera* camera = &recon.camera_of(obs.image_id);
      problem.add_residual_block({layout.pose_block.at(obs.image_id), layout.point_block.at(id)}, 2,
                                 opts.geometric_loss,
                                 detail::reprojection_residual(camera, recon.keypoint(obs.key()).location));
      layout.residual_obs.emplace_back(obs.key(), id);
    }
  report.num_observations = layout.residual_obs.size();
  report.summary = lm_solve(problem, detail::solver_options(opts));
  detail::collect_dropped(report.summary, layout, report);
  detail::write_back(recon, problem, layout);
  return report;
}

// ---------------------------------------------------------------------------
// Query pose refinement

struct QueryCorrespondence {
  NodeKey keypoint;  // query keypoint; its patch lives in the query patch set
  Vec2 location = Vec2::Zero();
  Vec3 point = Vec3::Zero();
  std::vector<std::pair<NodeKey, Eigen::VectorXd>> track_features;
};

struct QueryPoseResult {
  Pose pose;
  LMSummary summary;
  std::vector<NodeKey> references;  // chosen observation per correspondence
};

inline constexpr std::size_t kMinQueryInliers = 4;

// Pose-only featuremetric refinement; each correspondence is aligned to the
// observation feature of its track closest to the query keypoint's feature.
inline QueryPoseResult refine_query_pose(const Pose& pose, const Camera& camera,
                                         const std::vector<QueryCorrespondence>& inliers,
                                         const FeaturePatchSet& query_patches, const BAOptions& opts) {
  if (inliers.size() < kMinQueryInliers)
    fail(ErrorCode::TooFewInliers, "query pose refinement needs at least 4 inliers, got " +
                                       std::to_string(inliers.size()));
  QueryPoseResult out;
  LMProblem problem;
  problem.set_invalid_policy(InvalidPolicy::Deactivate);
  const int pose_block =
      problem.add_parameter_block(detail::pose_values(pose), BlockRole::Camera, 6, PlusFunction(detail::pose_plus));
  for (const auto& c : inliers) {
    const FeaturePatch* patch = &query_patches.at(c.keypoint);
    const Eigen::VectorXd fq = interpolate(*patch, c.location).value;
    const auto& ref = c.track_features[most_similar_observation(fq, c.track_features)];
    out.references.push_back(ref.first);
    const int point_block = problem.add_parameter_block({c.point.x(), c.point.y(), c.point.z()}, BlockRole::Point);
    problem.set_constant(point_block);
    problem.add_residual_block({pose_block, point_block}, patch->channels, opts.loss,
                               detail::exact_residual(&camera, patch, ref.second));
  }
  out.summary = lm_solve(problem, detail::solver_options(opts));
  out.pose = detail::pose_from(problem.values(pose_block).data());
  return out;
}

}  // namespace featref
