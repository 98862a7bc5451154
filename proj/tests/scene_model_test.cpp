#include "featref/scene_model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"

namespace featref {
namespace {

using test::random_pose;
using test::random_vec3;

TEST(Project, OnAxisIdentity) {
  const Camera cam = Camera::simple_pinhole(1, 10, 10, 1.0, 0.0, 0.0);
  const Vec2 px = project(Pose{}, cam, Vec3(0, 0, 1));
  EXPECT_DOUBLE_EQ(px.x(), 0.0);
  EXPECT_DOUBLE_EQ(px.y(), 0.0);
}

TEST(Project, HandEvaluatedPinhole) {
  const Camera cam = Camera::pinhole(1, 640, 480, 100, 100, 320, 240);
  const Vec2 px = project(Pose{}, cam, Vec3(1, 2, 2));
  EXPECT_NEAR(px.x(), 370.0, 1e-12);
  EXPECT_NEAR(px.y(), 340.0, 1e-12);
}

TEST(Project, BehindCameraThrows) {
  const Camera cam = Camera::pinhole(1, 640, 480, 100, 100, 320, 240);
  EXPECT_FEATREF_ERROR(project(Pose{}, cam, Vec3(0, 0, -1)), ErrorCode::CheiralityViolation);
  EXPECT_FEATREF_ERROR(project_with_jacobians(Pose{}, cam, Vec3(0, 0, 0)), ErrorCode::CheiralityViolation);
}

TEST(Project, BackProjectionAlongRay) {
  std::mt19937_64 rng(7);
  const Camera cam = Camera::pinhole(1, 640, 480, 450, 460, 310, 250);
  for (int i = 0; i < 100; ++i) {
    const Pose pose = random_pose(rng);
    const Vec3 p = random_vec3(rng, -1, 1) + Vec3(0, 0, 5);
    const Vec3 pc = pose.transform(p);
    const Vec2 px = project(pose, cam, p);
    const Vec3 ray = pixel_ray(pose, cam, px);
    const Vec3 back = pose.center() + ray * pc.z();
    EXPECT_LT((back - p).norm(), 1e-9);
  }
}

Eigen::Matrix<double, 2, 6> numeric_pose_jacobian(const Pose& pose, const Camera& cam, const Vec3& p) {
  Eigen::Matrix<double, 2, 6> J;
  const double h = 1e-6;
  for (int k = 0; k < 6; ++k) {
    Eigen::Matrix<double, 6, 1> d = Eigen::Matrix<double, 6, 1>::Zero();
    d(k) = h;
    const Vec2 plus = project(pose.retract(d), cam, p);
    d(k) = -h;
    const Vec2 minus = project(pose.retract(d), cam, p);
    J.col(k) = (plus - minus) / (2 * h);
  }
  return J;
}

Eigen::Matrix<double, 2, 3> numeric_point_jacobian(const Pose& pose, const Camera& cam, const Vec3& p) {
  Eigen::Matrix<double, 2, 3> J;
  const double h = 1e-6;
  for (int k = 0; k < 3; ++k) {
    Vec3 d = Vec3::Zero();
    d(k) = h;
    J.col(k) = (project(pose, cam, p + d) - project(pose, cam, p - d)) / (2 * h);
  }
  return J;
}

TEST(ProjectWithJacobians, MatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const Camera cam = Camera::pinhole(1, 640, 480, 500, 520, 320, 240);
  for (int i = 0; i < 100; ++i) {
    const Pose pose = random_pose(rng);
    const Vec3 p = random_vec3(rng, -1, 1) + Vec3(0, 0, 4);
    const auto j = project_with_jacobians(pose, cam, p);
    const auto jp = numeric_pose_jacobian(pose, cam, p);
    const auto jx = numeric_point_jacobian(pose, cam, p);
    EXPECT_LT((j.d_pose - jp).norm() / jp.norm(), 1e-4);
    EXPECT_LT((j.d_point - jx).norm() / jx.norm(), 1e-4);
    EXPECT_LT((j.pixel - project(pose, cam, p)).norm(), 1e-12);
  }
}

TEST(ProjectWithJacobians, OnAxisDepthTranslationHasNoEffect) {
  const Camera cam = Camera::simple_pinhole(1, 10, 10, 1.0, 0.0, 0.0);
  const auto j = project_with_jacobians(Pose{}, cam, Vec3(0, 0, 3));
  EXPECT_DOUBLE_EQ(j.d_pose(0, 5), 0.0);
  EXPECT_DOUBLE_EQ(j.d_pose(1, 5), 0.0);
}

TEST(ProjectWithJacobians, PointJacobianAtUnitDepth) {
  const Camera cam = Camera::simple_pinhole(1, 10, 10, 1.0, 0.0, 0.0);
  const auto j = project_with_jacobians(Pose{}, cam, Vec3(0, 0, 1));
  Eigen::Matrix<double, 2, 3> expected;
  expected << 1, 0, 0, 0, 1, 0;
  EXPECT_LT((j.d_point - expected).norm(), 1e-15);
}

TEST(Pose, CompositionStaysOrthonormal) {
  std::mt19937_64 rng(3);
  Pose acc;
  for (int i = 0; i < 10000; ++i) {
    acc = acc.compose(random_pose(rng, 0.5, 1.0));
    acc.rotation = orthonormalize(acc.rotation);
  }
  const Mat3 err = acc.rotation.transpose() * acc.rotation - Mat3::Identity();
  EXPECT_LT(err.cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_NEAR(acc.rotation.determinant(), 1.0, 1e-9);
}

TEST(Pose, RetractKeepsRotationValid) {
  std::mt19937_64 rng(5);
  Pose p = random_pose(rng);
  for (int i = 0; i < 1000; ++i) {
    Eigen::Matrix<double, 6, 1> d;
    d << random_vec3(rng, -0.2, 0.2), random_vec3(rng, -1, 1);
    p = p.retract(d);
  }
  EXPECT_LT((p.rotation.transpose() * p.rotation - Mat3::Identity()).norm(), 1e-9);
  EXPECT_NEAR(p.rotation.determinant(), 1.0, 1e-9);
}

std::vector<TriangulationView> views_of(const Vec3& point, const std::vector<Pose>& poses, const Camera& cam) {
  std::vector<TriangulationView> v;
  for (const auto& pose : poses) v.push_back({project(pose, cam, point), pose, cam});
  return v;
}

TEST(TriangulateDlt, NoiseFreeTwoViews) {
  const Camera cam = Camera::pinhole(1, 640, 480, 500, 500, 320, 240);
  Pose a;
  Pose b;
  b.translation = Vec3(-1, 0, 0);
  const Vec3 point(0.3, -0.2, 5.0);
  const Vec3 est = triangulate_dlt(views_of(point, {a, b}, cam));
  EXPECT_LT((est - point).norm(), 1e-9);
}

TEST(TriangulateDlt, SingleObservationIsDegenerate) {
  const Camera cam = Camera::pinhole(1, 640, 480, 500, 500, 320, 240);
  EXPECT_FEATREF_ERROR(triangulate_dlt(views_of(Vec3(0, 0, 5), {Pose{}}, cam)), ErrorCode::DegenerateGeometry);
}

TEST(TriangulateDlt, ParallelRaysAreDegenerate) {
  const Camera cam = Camera::pinhole(1, 640, 480, 500, 500, 320, 240);
  // Two identical cameras see identical rays.
  EXPECT_FEATREF_ERROR(triangulate_dlt(views_of(Vec3(0.1, 0, 5), {Pose{}, Pose{}}, cam)),
                       ErrorCode::DegenerateGeometry);
}

double total_reprojection(const Vec3& p, const std::vector<TriangulationView>& views) {
  double s = 0.0;
  for (const auto& v : views) s += (project(v.pose, v.camera, p) - v.pixel).squaredNorm();
  return s;
}

TEST(TriangulateDlt, MoreViewsBeatEveryPairAndNearGridOptimum) {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> noise(0.0, 0.5);
  const Camera cam = Camera::pinhole(1, 640, 480, 500, 500, 320, 240);
  std::vector<Pose> poses;
  for (int i = 0; i < 5; ++i) {
    const double angle = 2.0 * M_PI * i / 5.0;
    poses.push_back(Pose::look_at(Vec3(1.5 * std::cos(angle), 1.5 * std::sin(angle), -5), Vec3::Zero(), Vec3::UnitY()));
  }
  const Vec3 truth(0.2, -0.1, 0.3);
  auto views = views_of(truth, poses, cam);
  for (auto& v : views) v.pixel += Vec2(noise(rng), noise(rng));
  const Vec3 all = triangulate_dlt(views);
  const double all_err = total_reprojection(all, views);
  for (int i = 0; i < 5; ++i)
    for (int j = i + 1; j < 5; ++j) {
      const Vec3 pair = triangulate_dlt({views[i], views[j]});
      EXPECT_LT(all_err, total_reprojection(pair, views)) << i << "," << j;
    }
  // Exhaustive grid around the truth: coarse pass then a fine pass.
  Vec3 best = truth;
  double best_err = total_reprojection(best, views);
  for (double step : {4e-3, 2e-4}) {
    const Vec3 center = best;
    for (int a = -25; a <= 25; ++a)
      for (int b = -25; b <= 25; ++b)
        for (int c = -25; c <= 25; ++c) {
          const Vec3 p = center + step * Vec3(a, b, c);
          const double e = total_reprojection(p, views);
          if (e < best_err) {
            best_err = e;
            best = p;
          }
        }
  }
  EXPECT_LT((all - best).norm(), 5e-3);
  EXPECT_LT(all_err, best_err * 1.01 + 1e-9);
}

Reconstruction single_point_scene(const Vec2& displacement) {
  Reconstruction r;
  r.add_camera(Camera::pinhole(1, 640, 480, 500, 500, 320, 240));
  Image img;
  img.image_id = 1;
  img.camera_id = 1;
  const Vec3 p(0.1, 0.2, 4.0);
  img.add_keypoint(project(Pose{}, r.camera(1), p) + displacement);
  r.add_image(img);
  Point3D pt;
  pt.point_id = 1;
  pt.position = p;
  pt.track = {{1, 0}};
  r.add_point(pt);
  return r;
}

TEST(ReprojectionStats, PythagoreanDisplacement) {
  const auto stats = reprojection_stats(single_point_scene(Vec2(3, 4)));
  EXPECT_NEAR(stats.mean, 5.0, 1e-9);
  EXPECT_NEAR(stats.median, 5.0, 1e-9);
  EXPECT_NEAR(stats.max, 5.0, 1e-9);
}

TEST(ReprojectionStats, NoiseFreeIsZero) {
  EXPECT_LT(reprojection_stats(single_point_scene(Vec2::Zero())).mean, 1e-9);
}

TEST(ReprojectionStats, MatchesScriptedRecomputation) {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> noise(0.0, 1.0);
  Reconstruction r;
  const Camera cam = Camera::pinhole(1, 640, 480, 500, 500, 320, 240);
  r.add_camera(cam);
  std::vector<Pose> poses;
  for (int i = 0; i < 4; ++i) {
    Image img;
    img.image_id = i + 1;
    img.camera_id = 1;
    img.pose = Pose::look_at(Vec3(i - 1.5, 0.3 * i, -6), Vec3::Zero(), Vec3::UnitY());
    poses.push_back(img.pose);
    r.add_image(img);
  }
  std::vector<double> expected;
  Reconstruction with_kps = r;
  std::vector<Image> imgs;
  for (const auto& [id, img] : r.images()) imgs.push_back(img);
  std::vector<Vec3> pts;
  for (int j = 0; j < 20; ++j) pts.push_back(random_vec3(rng, -1, 1));
  for (auto& img : imgs)
    for (const auto& p : pts) img.add_keypoint(project(img.pose, cam, p) + Vec2(noise(rng), noise(rng)));
  Reconstruction scene;
  scene.add_camera(cam);
  for (const auto& img : imgs) scene.add_image(img);
  for (int j = 0; j < 20; ++j) {
    Point3D pt;
    pt.point_id = j + 10;
    pt.position = pts[j];
    for (int i = 0; i < 4; ++i) pt.track.push_back({i + 1, j});
    scene.add_point(pt);
  }
  // Independent recomputation straight from the pinhole formula.
  for (int j = 0; j < 20; ++j)
    for (int i = 0; i < 4; ++i) {
      const Vec3 pc = imgs[i].pose.rotation * pts[j] + imgs[i].pose.translation;
      const Vec2 px(500 * pc.x() / pc.z() + 320, 500 * pc.y() / pc.z() + 240);
      expected.push_back((px - imgs[i].keypoints[j].location).norm());
    }
  double mean = 0.0;
  for (double e : expected) mean += e;
  mean /= expected.size();
  std::sort(expected.begin(), expected.end());
  const double median = 0.5 * (expected[39] + expected[40]);
  const auto stats = reprojection_stats(scene);
  EXPECT_DOUBLE_EQ(stats.mean, mean);
  EXPECT_DOUBLE_EQ(stats.median, median);
  EXPECT_DOUBLE_EQ(stats.max, expected.back());
  EXPECT_EQ(stats.num_observations, 80u);
}

TEST(ReprojectionStats, SkipsCheiralityViolations) {
  Reconstruction r = single_point_scene(Vec2::Zero());
  r.set_point_position(1, Vec3(0, 0, -2));
  const auto stats = reprojection_stats(r);
  EXPECT_EQ(stats.num_skipped, 1u);
  EXPECT_EQ(stats.num_observations, 0u);
}

TEST(Reconstruction, TrackInvariantEnforcedOnMutation) {
  Reconstruction r;
  r.add_camera(Camera::pinhole(1, 100, 100, 50, 50, 50, 50));
  for (int i = 1; i <= 2; ++i) {
    Image img;
    img.image_id = i;
    img.camera_id = 1;
    img.add_keypoint(Vec2(10, 10));
    img.add_keypoint(Vec2(20, 20));
    r.add_image(img);
  }
  Point3D p;
  p.point_id = 1;
  p.track = {{1, 0}, {2, 0}};
  r.add_point(p);
  EXPECT_FEATREF_ERROR(r.add_observation(1, {1, 1}), ErrorCode::TrackInvariant);
  EXPECT_EQ(r.point(1).track.size(), 2u);
  Point3D bad;
  bad.point_id = 2;
  bad.track = {{2, 1}, {2, 0}};
  EXPECT_FEATREF_ERROR(r.add_point(bad), ErrorCode::TrackInvariant);
  Point3D dangling;
  dangling.point_id = 3;
  dangling.track = {{1, 7}};
  EXPECT_FEATREF_ERROR(r.add_point(dangling), ErrorCode::DanglingReference);
  Image orphan;
  orphan.image_id = 9;
  orphan.camera_id = 42;
  EXPECT_FEATREF_ERROR(r.add_image(orphan), ErrorCode::DanglingReference);
  EXPECT_NO_THROW(r.validate());
}

TEST(Camera, RejectsInvalidIntrinsics) {
  Reconstruction r;
  EXPECT_FEATREF_ERROR(r.add_camera(Camera::pinhole(1, 100, 100, -5, 50, 50, 50)), ErrorCode::InvalidArgument);
  EXPECT_FEATREF_ERROR(r.add_camera(Camera::pinhole(1, 100, 100, 5, 50, 150, 50)), ErrorCode::InvalidArgument);
}

}  // namespace
}  // namespace featref
