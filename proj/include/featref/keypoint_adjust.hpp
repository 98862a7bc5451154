#pragma once

#include <Eigen/Core>

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "featref/errors.hpp"
#include "featref/feature_store.hpp"
#include "featref/match_graph.hpp"
#include "featref/parallel.hpp"
#include "featref/robust_optim.hpp"

namespace featref {

using KeypointLocations = std::map<NodeKey, Vec2>;

inline constexpr double kDefaultMaxDrift = 8.0;
inline constexpr double kDefaultMinConfidence = 1e-3;

inline LMOptions default_ka_lm_options() {
  LMOptions o;
  o.max_iterations = 100;
  o.parameter_tolerance = 1e-4;
  return o;
}

struct KAOptions {
  double max_drift = kDefaultMaxDrift;  // K, pixels
  RobustLoss loss = RobustLoss::cauchy(kDefaultCauchyScale);
  LMOptions lm = default_ka_lm_options();
  double min_confidence = kDefaultMinConfidence;
  int num_threads = 1;  // across tracks; each track solve is serial

  void validate(int patch_size) const {
    if (!(max_drift > 0.0)) fail(ErrorCode::ConfigInvalid, "drift bound must be positive");
    if (max_drift > 0.5 * patch_size)
      fail(ErrorCode::ConfigInvalid, "drift bound exceeds half the patch size");
    if (!(min_confidence >= 0.0)) fail(ErrorCode::ConfigInvalid, "minimum confidence must be >= 0");
  }
};

namespace detail {

// Projection onto the closed ball |p - center| <= radius. The result never
// exceeds the radius when measured with Eigen's norm.
inline Vec2 clamp_to_ball(const Vec2& p, const Vec2& center, double radius) {
  const Vec2 d = p - center;
  const double n = d.norm();
  if (n <= radius) return p;
  double scale = radius / n;
  Vec2 out = center + scale * d;
  while ((out - center).norm() > radius) {
    scale = std::nextafter(scale, 0.0);
    out = center + scale * d;
  }
  return out;
}

inline PlusFunction ball_plus(const Vec2& center, double radius) {
  return [center, radius](const double* x, const double* delta, double* out) {
    const Vec2 p = clamp_to_ball(Vec2(x[0] + delta[0], x[1] + delta[1]), center, radius);
    out[0] = p.x();
    out[1] = p.y();
  };
}

inline Vec2 lookup_location(const KeypointLocations& kps, const NodeKey& key) {
  auto it = kps.find(key);
  if (it == kps.end())
    fail(ErrorCode::InvalidArgument, "no keypoint location for (" + std::to_string(key.image_id) + ", " +
                                         std::to_string(key.keypoint_id) + ")");
  return it->second;
}

// Residual F_u[p_u] - F_v[p_v] for one match edge.
inline ResidualFunction edge_residual(const FeaturePatch* pu, const FeaturePatch* pv) {
  return [pu, pv](std::span<const double* const> x, double* r, std::span<double* const> J) {
    const int D = pu->channels;
    std::vector<double> fu(static_cast<std::size_t>(3 * D)), fv(static_cast<std::size_t>(3 * D));
    const bool want = !J.empty();
    if (!interpolate_grid(GridView::of(*pu), Vec2(x[0][0], x[0][1]), fu.data(), want ? fu.data() + D : nullptr,
                          want ? fu.data() + 2 * D : nullptr) ||
        !interpolate_grid(GridView::of(*pv), Vec2(x[1][0], x[1][1]), fv.data(), want ? fv.data() + D : nullptr,
                          want ? fv.data() + 2 * D : nullptr))
      return EvalStatus::Invalid;
    for (int c = 0; c < D; ++c) r[c] = fu[static_cast<std::size_t>(c)] - fv[static_cast<std::size_t>(c)];
    if (!want) return EvalStatus::Ok;
    for (int c = 0; c < D; ++c) {
      if (J[0]) {
        J[0][2 * c] = fu[static_cast<std::size_t>(D + c)];
        J[0][2 * c + 1] = fu[static_cast<std::size_t>(2 * D + c)];
      }
      if (J[1]) {
        J[1][2 * c] = -fv[static_cast<std::size_t>(D + c)];
        J[1][2 * c + 1] = -fv[static_cast<std::size_t>(2 * D + c)];
      }
    }
    return EvalStatus::Ok;
  };
}

// Residual F[p] - f for a fixed target feature.
inline ResidualFunction target_residual(const FeaturePatch* patch, Eigen::VectorXd target) {
  return [patch, target = std::move(target)](std::span<const double* const> x, double* r,
                                             std::span<double* const> J) {
    const int D = patch->channels;
    std::vector<double> f(static_cast<std::size_t>(3 * D));
    const bool want = !J.empty() && J[0];
    if (!interpolate_grid(GridView::of(*patch), Vec2(x[0][0], x[0][1]), f.data(), want ? f.data() + D : nullptr,
                          want ? f.data() + 2 * D : nullptr))
      return EvalStatus::Invalid;
    for (int c = 0; c < D; ++c) r[c] = f[static_cast<std::size_t>(c)] - target(c);
    if (want)
      for (int c = 0; c < D; ++c) {
        J[0][2 * c] = f[static_cast<std::size_t>(D + c)];
        J[0][2 * c + 1] = f[static_cast<std::size_t>(2 * D + c)];
      }
    return EvalStatus::Ok;
  };
}

}  // namespace detail

struct TrackAdjustment {
  std::int64_t track_id = 0;
  NodeKey frozen;
  KeypointLocations locations;  // every member, refined
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int iterations = 0;
  std::vector<double> cost_trace;  // initial cost, then every accepted step
  Termination termination = Termination::NoFreeParameters;
  std::size_t num_edges = 0;  // after the confidence threshold
};

// Featuremetric keypoint adjustment of one track. The topological center is
// frozen and every other member stays within max_drift of its start.
inline TrackAdjustment adjust_track(const TentativeTrack& track, const KeypointLocations& keypoints,
                                    const FeaturePatchSet& patches, const KAOptions& opts) {
  if (track.members.size() < 2) fail(ErrorCode::TrackTooSmall, "track needs at least two members");
  opts.validate(patches.size());
  TrackAdjustment out;
  out.track_id = track.track_id;
  out.frozen = topological_center(track);

  LMProblem problem;
  problem.set_invalid_policy(InvalidPolicy::RejectStep);
  std::map<NodeKey, int> block_of;
  for (const NodeKey& m : track.members) {
    if (!patches.contains(m)) fail(ErrorCode::MissingPatch, "track member has no feature patch");
    const Vec2 p0 = detail::lookup_location(keypoints, m);
    block_of[m] = problem.add_parameter_block({p0.x(), p0.y()}, BlockRole::Generic, 2,
                                              detail::ball_plus(p0, opts.max_drift));
    if (m == out.frozen) problem.set_constant(block_of[m]);
  }
  for (const Match& e : track.edges) {
    if (e.confidence < opts.min_confidence) continue;
    auto ia = block_of.find(e.a), ib = block_of.find(e.b);
    if (ia == block_of.end() || ib == block_of.end()) continue;
    const FeaturePatch* pa = &patches.at(e.a);
    const FeaturePatch* pb = &patches.at(e.b);
    problem.add_residual_block({ia->second, ib->second}, pa->channels, opts.loss, detail::edge_residual(pa, pb),
                               e.confidence);
    ++out.num_edges;
  }
  LMOptions lm = opts.lm;
  lm.num_threads = 1;
  lm.use_schur = false;
  const LMSummary s = lm_solve(problem, lm);
  out.initial_cost = s.initial_cost();
  out.final_cost = s.final_cost();
  out.iterations = s.iterations;
  out.cost_trace = s.cost_trace;
  out.termination = s.termination;
  for (const auto& [key, b] : block_of) {
    const auto& v = problem.values(b);
    out.locations[key] = Vec2(v[0], v[1]);
  }
  return out;
}

struct TrackReport {
  std::int64_t track_id = 0;
  bool ok = true;
  std::optional<ErrorCode> error;
  std::string message;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int iterations = 0;
  std::vector<double> cost_trace;
};

struct KAResult {
  KeypointLocations locations;       // refined members of successful tracks
  std::vector<TrackReport> reports;  // one per input track, input order
};

// Tracks are independent; a failing track is reported and its keypoints left out.
inline KAResult adjust_all(const std::vector<TentativeTrack>& tracks, const KeypointLocations& keypoints,
                           const FeaturePatchSet& patches, const KAOptions& opts) {
  opts.validate(patches.size());
  std::vector<std::optional<TrackAdjustment>> results(tracks.size());
  std::vector<TrackReport> reports(tracks.size());
  parallel_for(tracks.size(), opts.num_threads, [&](std::size_t i) {
    TrackReport& rep = reports[i];
    rep.track_id = tracks[i].track_id;
    try {
      results[i] = adjust_track(tracks[i], keypoints, patches, opts);
      rep.initial_cost = results[i]->initial_cost;
      rep.final_cost = results[i]->final_cost;
      rep.iterations = results[i]->iterations;
      rep.cost_trace = results[i]->cost_trace;
    } catch (const Error& e) {
      rep.ok = false;
      rep.error = e.code();
      rep.message = e.what();
    }
  });
  KAResult out;
  out.reports = std::move(reports);
  for (const auto& r : results)
    if (r) out.locations.insert(r->locations.begin(), r->locations.end());
  return out;
}

// Writes refined locations into the image keypoint tables; initial locations
// are kept as they were.
inline void apply_locations(Reconstruction& recon, const KeypointLocations& locations) {
  for (const auto& [key, p] : locations) recon.set_keypoint_location(key, p);
}

struct QueryKeypoint {
  NodeKey key;
  Vec2 location = Vec2::Zero();
  // Observation features of the matched 3D tracks.
  std::vector<std::pair<NodeKey, Eigen::VectorXd>> track_features;
};

struct QueryAdjustment {
  NodeKey key;
  Vec2 location = Vec2::Zero();
  NodeKey reference;  // observation the keypoint was aligned to
  double initial_cost = 0.0;
  double final_cost = 0.0;
};

// Index of the observation feature closest to F_q[p0]; ties -> lowest key.
inline std::size_t most_similar_observation(const Eigen::VectorXd& query_feature,
                                            const std::vector<std::pair<NodeKey, Eigen::VectorXd>>& candidates) {
  if (candidates.empty()) fail(ErrorCode::InvalidArgument, "query keypoint has no matched observations");
  std::size_t best = 0;
  double best_d = (candidates[0].second - query_feature).squaredNorm();
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const double d = (candidates[i].second - query_feature).squaredNorm();
    if (d < best_d || (d == best_d && candidates[i].first < candidates[best].first)) {
      best = i;
      best_d = d;
    }
  }
  return best;
}

inline std::vector<QueryAdjustment> adjust_query_keypoints(const std::vector<QueryKeypoint>& queries,
                                                           const FeaturePatchSet& query_patches,
                                                           const KAOptions& opts) {
  opts.validate(query_patches.size());
  std::vector<QueryAdjustment> out(queries.size());
  parallel_for(queries.size(), opts.num_threads, [&](std::size_t i) {
    const QueryKeypoint& q = queries[i];
    const FeaturePatch& patch = query_patches.at(q.key);
    const FeatureSample f0 = interpolate(patch, q.location);
    const auto& ref = q.track_features[most_similar_observation(f0.value, q.track_features)];
    if (ref.second.size() != patch.channels)
      fail(ErrorCode::InvalidArgument, "observation feature dimension differs from the query patch");
    LMProblem problem;
    const int b = problem.add_parameter_block({q.location.x(), q.location.y()}, BlockRole::Generic, 2,
                                              detail::ball_plus(q.location, opts.max_drift));
    problem.add_residual_block({b}, patch.channels, opts.loss, detail::target_residual(&patch, ref.second));
    LMOptions lm = opts.lm;
    lm.num_threads = 1;
    const LMSummary s = lm_solve(problem, lm);
    out[i] = QueryAdjustment{q.key, Vec2(problem.values(b)[0], problem.values(b)[1]), ref.first,
                             s.initial_cost(), s.final_cost()};
  });
  return out;
}

}  // namespace featref
