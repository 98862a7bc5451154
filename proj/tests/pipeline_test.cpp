#include <gtest/gtest.h>

#include "featref/evaluate.hpp"
#include "featref/pipeline.hpp"
#include "featref/synth.hpp"
#include "test_util.hpp"

using namespace featref;

namespace {

// Four cameras on a ring looking at the origin, one keypoint each at the
// exact projection of X.
Reconstruction four_views(const Vec3& X) {
  Reconstruction r;
  r.add_camera(Camera::simple_pinhole(1, 640, 480, 500, 320, 240));
  for (int i = 0; i < 4; ++i) {
    Image img;
    img.image_id = i + 1;
    img.camera_id = 1;
    const double a = i * M_PI / 2.0;
    img.pose = Pose::look_at(Vec3(3 * std::cos(a), 3 * std::sin(a), 10), Vec3::Zero(), Vec3(0, 1, 0));
    img.add_keypoint(project(img.pose, r.camera(1), X));
    r.add_image(img);
  }
  return r;
}

TentativeTrack track_of(const Reconstruction& r) {
  TentativeTrack t;
  for (const auto& [id, img] : r.images()) t.members.push_back(NodeKey{id, 0});
  return t;
}

}  // namespace

TEST(Triangulation, ExactViewsRecoverPoint) {
  const Vec3 X(0.3, -0.2, 0.1);
  Reconstruction r = four_views(X);
  const TriangulationReport rep = triangulate_tracks(r, {track_of(r)});
  EXPECT_EQ(rep.points, 1u);
  EXPECT_EQ(rep.rejected_observations, 0u);
  ASSERT_EQ(r.points().size(), 1u);
  EXPECT_EQ(r.points().begin()->first, 1);
  EXPECT_LT((r.points().begin()->second.position - X).norm(), 1e-9);
}

TEST(Triangulation, GrossOutlierObservationRejected) {
  const Vec3 X(0.3, -0.2, 0.1);
  Reconstruction r = four_views(X);
  r.set_keypoint_location(NodeKey{3, 0}, r.keypoint(NodeKey{3, 0}).location + Vec2(40, -25));
  const TriangulationReport rep = triangulate_tracks(r, {track_of(r)});
  EXPECT_EQ(rep.rejected_observations, 1u);
  const Point3D& p = r.points().begin()->second;
  ASSERT_EQ(p.track.size(), 3u);
  for (const auto& o : p.track) EXPECT_NE(o.image_id, 3);
  EXPECT_LT((p.position - X).norm(), 1e-9);
}

TEST(Triangulation, TwoInconsistentViewsFail) {
  Reconstruction r = four_views(Vec3::Zero());
  r.set_keypoint_location(NodeKey{1, 0}, Vec2(100, 100));
  TentativeTrack t;
  t.members = {NodeKey{1, 0}, NodeKey{3, 0}};
  const TriangulationReport rep = triangulate_tracks(r, {t});
  EXPECT_EQ(rep.failed_tracks, 1u);
  EXPECT_TRUE(r.points().empty());
}

TEST(Triangulation, RetriangulateKeepsIds) {
  const Vec3 X(0.3, -0.2, 0.1);
  Reconstruction r = four_views(X);
  triangulate_tracks(r, {track_of(r)});
  r.set_keypoint_location(NodeKey{1, 0}, r.keypoint(NodeKey{1, 0}).location + Vec2(0.5, 0.0));
  const TriangulationReport rep = retriangulate(r);
  EXPECT_EQ(rep.points, 1u);
  EXPECT_EQ(r.points().begin()->first, 1);
  EXPECT_GT((r.points().begin()->second.position - X).norm(), 0.0);
}

// Each refinement stage lowers the error it targets, across noise levels.
class PipelineNoise : public ::testing::TestWithParam<double> {};

TEST_P(PipelineNoise, StagesImprove) {
  SynthConfig c;
  c.n_cameras = 6;
  c.n_points = 80;
  c.keypoint_noise = GetParam();
  c.seed = 21;
  const SynthScene s = synth_generate(c);
  const FeaturePatchSet patches = render_patches(s.field, s.perturbed, c.patch_size);
  auto repatch = [&](const Reconstruction& r) { return render_patches(s.field, r, c.patch_size); };
  const KeypointTransfer transfer = [&](std::int64_t from, const Vec2& loc, std::int64_t to) {
    return plane_transfer(s.truth, from, loc, to);
  };
  const SurfaceProjector plane = [](const Vec3& p) { return Vec3(p.x(), p.y(), 0.0); };

  auto run = [&](bool ka, bool fba) {
    PipelineOptions o;
    o.keypoint_adjustment = ka;
    o.featuremetric_ba = fba;
    return run_pipeline(s.perturbed, s.matches, patches, o, repatch);
  };
  const PipelineResult base = run(false, false);
  const PipelineResult ka = run(true, false);
  const PipelineResult full = run(true, true);

  const EvalReport e0 = evaluate(base.model, s.truth, {}, transfer, plane);
  const EvalReport e1 = evaluate(ka.model, s.truth, {}, transfer, plane);
  const EvalReport e2 = evaluate(full.model, s.truth, {}, transfer, plane);
  EXPECT_LT(e1.track_consistency.mean, e0.track_consistency.mean);
  EXPECT_LT(e1.surface_error->mean, e0.surface_error->mean);
  // Below the interpolation floor the two stages are indistinguishable.
  constexpr double kFloor = 0.005;  // px
  if (e1.surface_error->mean > kFloor)
    EXPECT_LT(e2.surface_error->mean, e1.surface_error->mean);
  else
    EXPECT_LT(e2.surface_error->mean, kFloor);

  ASSERT_TRUE(ka.ka);
  for (const auto& [key, loc] : ka.ka->locations)
    EXPECT_LE((loc - s.perturbed.keypoint(key).location).norm(), PipelineOptions{}.ka.max_drift);
}

INSTANTIATE_TEST_SUITE_P(Sigma, PipelineNoise, ::testing::Values(0.5, 1.0, 2.0, 3.0));

TEST(Pipeline, SkippingStagesLeavesKeypoints) {
  SynthConfig c;
  c.n_cameras = 4;
  c.n_points = 30;
  c.seed = 4;
  const SynthScene s = synth_generate(c);
  PipelineOptions o;
  o.keypoint_adjustment = false;
  o.featuremetric_ba = false;
  const PipelineResult r = run_pipeline(s.perturbed, s.matches, FeaturePatchSet{}, o);
  EXPECT_FALSE(r.ka);
  EXPECT_FALSE(r.featuremetric);
  for (const auto& [id, img] : r.model.images())
    for (const auto& k : img.keypoints) EXPECT_EQ(k.location, s.perturbed.keypoint(k.key()).location);
  EXPECT_GT(r.triangulation.points, 0u);
}
