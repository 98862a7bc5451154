#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "featref/bundle_adjust.hpp"
#include "featref/errors.hpp"
#include "featref/feature_store.hpp"
#include "featref/keypoint_adjust.hpp"
#include "featref/match_graph.hpp"
#include "featref/scene_model.hpp"

namespace featref {

struct TriangulationOptions {
  double max_reprojection_error = 4.0;  // px; worst observation dropped while above
};

struct TriangulationReport {
  std::size_t tracks = 0;
  std::size_t points = 0;
  std::size_t rejected_observations = 0;
  std::size_t failed_tracks = 0;
};

namespace detail {

// DLT point plus its worst and summed squared reprojection errors.
inline std::optional<Vec3> try_dlt(const Reconstruction& recon, const std::vector<Observation>& obs,
                                   double* worst_error = nullptr, double* squared_error = nullptr) {
  std::vector<TriangulationView> views;
  for (const auto& o : obs) {
    const Image& img = recon.image(o.image_id);
    views.push_back(TriangulationView{recon.keypoint(o.key()).location, img.pose, recon.camera(img.camera_id)});
  }
  Vec3 X;
  try {
    X = triangulate_dlt(views);
  } catch (const Error&) {
    return std::nullopt;
  }
  double we = 0.0, se = 0.0;
  for (const auto& v : views) {
    const Vec3 pc = v.pose.transform(X);
    if (!(pc.z() > kMinDepth)) return std::nullopt;
    const double e = (project_camera_point(v.camera, pc) - v.pixel).norm();
    we = std::max(we, e);
    se += e * e;
  }
  if (worst_error) *worst_error = we;
  if (squared_error) *squared_error = se;
  return X;
}

// DLT followed by iterative removal of the observation whose omission gives
// the smallest summed squared reprojection error. Returns the surviving
// observations, or nothing if fewer than two remain.
inline std::optional<std::pair<Vec3, std::vector<Observation>>> triangulate_robust(
    const Reconstruction& recon, std::vector<Observation> obs, const TriangulationOptions& opts,
    std::size_t& rejected) {
  while (obs.size() >= 2) {
    double worst_e = 0.0;
    const std::optional<Vec3> X = try_dlt(recon, obs, &worst_e);
    if (X && worst_e <= opts.max_reprojection_error) return std::pair{*X, obs};
    if (obs.size() == 2) return std::nullopt;
    double best = INFINITY;
    std::size_t drop = 0;
    for (std::size_t i = 0; i < obs.size(); ++i) {
      std::vector<Observation> rest = obs;
      rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(i));
      double e = 0.0;
      if (try_dlt(recon, rest, nullptr, &e) && e < best) {
        best = e;
        drop = i;
      }
    }
    if (!std::isfinite(best)) return std::nullopt;
    obs.erase(obs.begin() + static_cast<std::ptrdiff_t>(drop));
    ++rejected;
  }
  return std::nullopt;
}

}  // namespace detail

// Replaces all points by one point per track, triangulated with the current
// poses and keypoint locations. Point ids follow track order from 1.
inline TriangulationReport triangulate_tracks(Reconstruction& recon, const std::vector<TentativeTrack>& tracks,
                                              const TriangulationOptions& opts = {}) {
  TriangulationReport rep;
  recon.clear_points();
  std::int64_t next = 1;
  for (const auto& t : tracks) {
    ++rep.tracks;
    std::vector<Observation> obs;
    for (const NodeKey& m : t.members) obs.push_back(Observation{m.image_id, m.keypoint_id});
    auto res = detail::triangulate_robust(recon, obs, opts, rep.rejected_observations);
    if (!res) {
      ++rep.failed_tracks;
      continue;
    }
    Point3D p;
    p.point_id = next++;
    p.position = res->first;
    p.track = std::move(res->second);
    recon.add_point(p);
    ++rep.points;
  }
  return rep;
}

// Re-triangulates the existing points in place; points that fail are removed.
inline TriangulationReport retriangulate(Reconstruction& recon, const TriangulationOptions& opts = {}) {
  TriangulationReport rep;
  std::vector<std::int64_t> ids;
  for (const auto& [id, p] : recon.points()) ids.push_back(id);
  for (std::int64_t id : ids) {
    ++rep.tracks;
    Point3D p = recon.point(id);
    auto res = detail::triangulate_robust(recon, p.track, opts, rep.rejected_observations);
    recon.remove_point(id);
    if (!res) {
      ++rep.failed_tracks;
      continue;
    }
    p.position = res->first;
    p.track = std::move(res->second);
    recon.add_point(p);
    ++rep.points;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Refinement pipeline: tracks -> (KA) -> triangulation -> geometric BA -> (F-BA)

struct PipelineOptions {
  bool keypoint_adjustment = true;
  bool featuremetric_ba = true;
  KAOptions ka;
  BAOptions ba;  // used by both BA stages; mode applies to F-BA
  TriangulationOptions triangulation;
  int num_threads = 1;
};

struct PipelineResult {
  Reconstruction model;
  std::vector<TentativeTrack> tracks;
  std::optional<KAResult> ka;
  TriangulationReport triangulation;
  BAReport geometric;
  std::optional<BAReport> featuremetric;
};

// Patches for the F-BA stage are requested through `patches_for` so callers
// can re-extract around refined keypoints; `patches` is used for KA.
inline PipelineResult run_pipeline(const Reconstruction& input, const std::vector<Match>& matches,
                                   const FeaturePatchSet& patches, const PipelineOptions& opts,
                                   const std::function<FeaturePatchSet(const Reconstruction&)>& patches_for = {}) {
  PipelineResult out;
  out.model = input;
  out.tracks = build_tracks(matches);
  if (opts.keypoint_adjustment) {
    KeypointLocations kps;
    for (const auto& [id, img] : input.images())
      for (const auto& k : img.keypoints) kps[k.key()] = k.location;
    KAOptions ka = opts.ka;
    ka.num_threads = opts.num_threads;
    out.ka = adjust_all(out.tracks, kps, patches, ka);
    apply_locations(out.model, out.ka->locations);
  }
  out.triangulation = triangulate_tracks(out.model, out.tracks, opts.triangulation);
  BAOptions ba = opts.ba;
  ba.num_threads = opts.num_threads;
  out.geometric = geometric_ba(out.model, ba);
  if (opts.featuremetric_ba) {
    const FeaturePatchSet fresh = patches_for ? patches_for(out.model) : FeaturePatchSet{};
    const FeaturePatchSet& use = patches_for ? fresh : patches;
    const TrackReferences refs = select_references(out.model, use, opts.ba.loss, opts.num_threads);
    out.featuremetric = featuremetric_ba(out.model, use, refs, ba);
  }
  return out;
}

}  // namespace featref
