#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "featref/errors.hpp"

namespace featref {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Points closer to the image plane than this are treated as behind the camera.
inline constexpr double kMinDepth = 1e-9;

// Identifies a keypoint across the whole reconstruction.
struct NodeKey {
  std::int64_t image_id = 0;
  std::int64_t keypoint_id = 0;

  friend auto operator<=>(const NodeKey&, const NodeKey&) = default;
};

enum class CameraModel { SimplePinhole, Pinhole };

struct Camera {
  std::int64_t camera_id = 0;
  CameraModel model = CameraModel::Pinhole;
  int width = 0;
  int height = 0;
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;

  static Camera simple_pinhole(std::int64_t id, int width, int height, double f, double cx,
                               double cy) {
    return Camera{id, CameraModel::SimplePinhole, width, height, f, f, cx, cy};
  }
  static Camera pinhole(std::int64_t id, int width, int height, double fx, double fy, double cx,
                        double cy) {
    return Camera{id, CameraModel::Pinhole, width, height, fx, fy, cx, cy};
  }

  Mat3 calibration() const {
    Mat3 K;
    K << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return K;
  }

  bool contains(const Vec2& p) const {
    return p.x() >= 0.0 && p.y() >= 0.0 && p.x() <= width && p.y() <= height;
  }

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) fail(ErrorCode::InvalidArgument, "focal length must be positive");
    if (model == CameraModel::SimplePinhole && fx != fy)
      fail(ErrorCode::InvalidArgument, "SimplePinhole requires fx == fy");
    if (cx < 0.0 || cx > width || cy < 0.0 || cy > height)
      fail(ErrorCode::InvalidArgument, "principal point outside the image");
  }
};

inline Mat3 skew(const Vec3& v) {
  Mat3 S;
  S << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return S;
}

inline Mat3 rotation_exp(const Vec3& omega) {
  const double angle = omega.norm();
  if (angle < 1e-12) return Mat3::Identity() + skew(omega);
  return Eigen::AngleAxisd(angle, omega / angle).toRotationMatrix();
}

// Closest rotation in the Frobenius sense (polar factor).
inline Mat3 orthonormalize(const Mat3& M) {
  Eigen::JacobiSVD<Mat3> svd(M, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 R = svd.matrixU() * svd.matrixV().transpose();
  if (R.determinant() < 0.0) {
    Mat3 U = svd.matrixU();
    U.col(2) *= -1.0;
    R = U * svd.matrixV().transpose();
  }
  return R;
}

// World-to-camera rigid transform: x_cam = R * x_world + t.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 transform(const Vec3& p) const { return rotation * p + translation; }
  Vec3 center() const { return -rotation.transpose() * translation; }

  Pose inverse() const { return Pose{rotation.transpose(), -rotation.transpose() * translation}; }

  // this ∘ other
  Pose compose(const Pose& other) const {
    return Pose{rotation * other.rotation, rotation * other.translation + translation};
  }

  // Local update: R <- exp(w) R, t <- t + dt, followed by re-orthonormalization.
  // delta = (w_x, w_y, w_z, dt_x, dt_y, dt_z).
  Pose retract(const Eigen::Matrix<double, 6, 1>& delta) const {
    Pose out;
    out.rotation = orthonormalize(rotation_exp(delta.head<3>()) * rotation);
    out.translation = translation + delta.tail<3>();
    return out;
  }

  static Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up_hint) {
    const Vec3 z = (target - eye).normalized();
    Vec3 x = up_hint.cross(z);
    if (x.norm() < 1e-12) x = Vec3::UnitX().cross(z);
    x.normalize();
    const Vec3 y = z.cross(x);
    Pose pose;
    pose.rotation.row(0) = x.transpose();
    pose.rotation.row(1) = y.transpose();
    pose.rotation.row(2) = z.transpose();
    pose.translation = -pose.rotation * eye;
    return pose;
  }
};

struct Keypoint {
  std::int64_t keypoint_id = 0;
  std::int64_t image_id = 0;
  Vec2 location = Vec2::Zero();
  Vec2 initial_location = Vec2::Zero();
  std::optional<Eigen::VectorXd> descriptor;

  NodeKey key() const { return NodeKey{image_id, keypoint_id}; }
};

struct Observation {
  std::int64_t image_id = 0;
  std::int64_t keypoint_id = 0;

  NodeKey key() const { return NodeKey{image_id, keypoint_id}; }
  friend auto operator<=>(const Observation&, const Observation&) = default;
};

struct Point3D {
  std::int64_t point_id = 0;
  Vec3 position = Vec3::Zero();
  std::vector<Observation> track;
  std::array<std::uint8_t, 3> color{128, 128, 128};
  double error = -1.0;
};

struct Image {
  std::int64_t image_id = 0;
  std::int64_t camera_id = 0;
  std::string name;
  Pose pose;
  // keypoints[k].keypoint_id == k
  std::vector<Keypoint> keypoints;

  std::int64_t add_keypoint(const Vec2& location) {
    Keypoint kp;
    kp.keypoint_id = static_cast<std::int64_t>(keypoints.size());
    kp.image_id = image_id;
    kp.location = location;
    kp.initial_location = location;
    keypoints.push_back(std::move(kp));
    return keypoints.back().keypoint_id;
  }
};

class Reconstruction {
 public:
  const std::map<std::int64_t, Camera>& cameras() const { return cameras_; }
  const std::map<std::int64_t, Image>& images() const { return images_; }
  const std::map<std::int64_t, Point3D>& points() const { return points_; }

  void add_camera(const Camera& camera) {
    camera.validate();
    cameras_[camera.camera_id] = camera;
  }

  void add_image(Image image) {
    if (!cameras_.count(image.camera_id))
      fail(ErrorCode::DanglingReference, "image " + std::to_string(image.image_id) +
                                             " references unknown camera " +
                                             std::to_string(image.camera_id));
    for (std::size_t k = 0; k < image.keypoints.size(); ++k) {
      image.keypoints[k].keypoint_id = static_cast<std::int64_t>(k);
      image.keypoints[k].image_id = image.image_id;
    }
    images_[image.image_id] = std::move(image);
  }

  void add_point(const Point3D& point) {
    check_track(point.track);
    points_[point.point_id] = point;
  }

  void add_observation(std::int64_t point_id, const Observation& obs) {
    Point3D& point = mutable_point(point_id);
    std::vector<Observation> track = point.track;
    track.push_back(obs);
    check_track(track);
    point.track = std::move(track);
  }

  void remove_point(std::int64_t point_id) { points_.erase(point_id); }
  void clear_points() { points_.clear(); }

  const Camera& camera(std::int64_t id) const {
    auto it = cameras_.find(id);
    if (it == cameras_.end()) fail(ErrorCode::DanglingReference, "unknown camera " + std::to_string(id));
    return it->second;
  }
  const Image& image(std::int64_t id) const {
    auto it = images_.find(id);
    if (it == images_.end()) fail(ErrorCode::DanglingReference, "unknown image " + std::to_string(id));
    return it->second;
  }
  const Point3D& point(std::int64_t id) const {
    auto it = points_.find(id);
    if (it == points_.end()) fail(ErrorCode::DanglingReference, "unknown point " + std::to_string(id));
    return it->second;
  }
  const Camera& camera_of(std::int64_t image_id) const { return camera(image(image_id).camera_id); }

  const Keypoint& keypoint(const NodeKey& key) const {
    const Image& img = image(key.image_id);
    if (key.keypoint_id < 0 || key.keypoint_id >= static_cast<std::int64_t>(img.keypoints.size()))
      fail(ErrorCode::DanglingReference, "unknown keypoint " + std::to_string(key.keypoint_id) +
                                             " in image " + std::to_string(key.image_id));
    return img.keypoints[static_cast<std::size_t>(key.keypoint_id)];
  }

  void set_pose(std::int64_t image_id, const Pose& pose) { mutable_image(image_id).pose = pose; }
  void set_point_position(std::int64_t point_id, const Vec3& p) { mutable_point(point_id).position = p; }
  void set_keypoint_location(const NodeKey& key, const Vec2& location) {
    keypoint(key);
    mutable_image(key.image_id).keypoints[static_cast<std::size_t>(key.keypoint_id)].location = location;
  }

  // Point id observed by each keypoint, for keypoints that belong to a track.
  std::map<NodeKey, std::int64_t> keypoint_to_point() const {
    std::map<NodeKey, std::int64_t> out;
    for (const auto& [id, point] : points_)
      for (const auto& obs : point.track) out[obs.key()] = id;
    return out;
  }

  std::int64_t next_point_id() const { return points_.empty() ? 1 : points_.rbegin()->first + 1; }

  void validate() const {
    for (const auto& [id, img] : images_)
      if (!cameras_.count(img.camera_id))
        fail(ErrorCode::DanglingReference, "image " + std::to_string(id) + " has no camera");
    for (const auto& [id, point] : points_) check_track(point.track);
  }

 private:
  Image& mutable_image(std::int64_t id) {
    auto it = images_.find(id);
    if (it == images_.end()) fail(ErrorCode::DanglingReference, "unknown image " + std::to_string(id));
    return it->second;
  }
  Point3D& mutable_point(std::int64_t id) {
    auto it = points_.find(id);
    if (it == points_.end()) fail(ErrorCode::DanglingReference, "unknown point " + std::to_string(id));
    return it->second;
  }

  void check_track(const std::vector<Observation>& track) const {
    std::set<std::int64_t> seen;
    for (const auto& obs : track) {
      keypoint(obs.key());
      if (!seen.insert(obs.image_id).second)
        fail(ErrorCode::TrackInvariant,
             "track observes image " + std::to_string(obs.image_id) + " more than once");
    }
  }

  std::map<std::int64_t, Camera> cameras_;
  std::map<std::int64_t, Image> images_;
  std::map<std::int64_t, Point3D> points_;
};

// ---------------------------------------------------------------------------
// Projection

inline Vec2 project_camera_point(const Camera& camera, const Vec3& pc) {
  if (!(pc.z() > kMinDepth)) fail(ErrorCode::CheiralityViolation, "point is behind the camera");
  return Vec2(camera.fx * pc.x() / pc.z() + camera.cx, camera.fy * pc.y() / pc.z() + camera.cy);
}

inline Vec2 project(const Pose& pose, const Camera& camera, const Vec3& point) {
  return project_camera_point(camera, pose.transform(point));
}

struct ProjectionJacobians {
  Vec2 pixel;
  // Columns: rotation increment (angle-axis, left-multiplied), translation increment.
  Eigen::Matrix<double, 2, 6> d_pose;
  Eigen::Matrix<double, 2, 3> d_point;
};

inline ProjectionJacobians project_with_jacobians(const Pose& pose, const Camera& camera,
                                                  const Vec3& point) {
  const Vec3 rotated = pose.rotation * point;
  const Vec3 pc = rotated + pose.translation;
  ProjectionJacobians out;
  out.pixel = project_camera_point(camera, pc);
  const double inv_z = 1.0 / pc.z();
  Eigen::Matrix<double, 2, 3> d_pc;
  d_pc << camera.fx * inv_z, 0.0, -camera.fx * pc.x() * inv_z * inv_z,  //
      0.0, camera.fy * inv_z, -camera.fy * pc.y() * inv_z * inv_z;
  out.d_pose.leftCols<3>() = -d_pc * skew(rotated);
  out.d_pose.rightCols<3>() = d_pc;
  out.d_point = d_pc * pose.rotation;
  return out;
}

// Ray through a pixel, in world coordinates.
inline Vec3 pixel_ray(const Pose& pose, const Camera& camera, const Vec2& pixel) {
  const Vec3 dir_cam((pixel.x() - camera.cx) / camera.fx, (pixel.y() - camera.cy) / camera.fy, 1.0);
  return pose.rotation.transpose() * dir_cam;
}

// ---------------------------------------------------------------------------
// Triangulation

struct TriangulationView {
  Vec2 pixel;
  Pose pose;
  Camera camera;
};

inline Vec3 triangulate_dlt(const std::vector<TriangulationView>& views) {
  if (views.size() < 2) fail(ErrorCode::DegenerateGeometry, "triangulation needs at least two views");
  Eigen::MatrixXd A(2 * views.size(), 4);
  for (std::size_t i = 0; i < views.size(); ++i) {
    const auto& v = views[i];
    Eigen::Matrix<double, 3, 4> P;
    P.leftCols<3>() = v.pose.rotation;
    P.col(3) = v.pose.translation;
    const double x = (v.pixel.x() - v.camera.cx) / v.camera.fx;
    const double y = (v.pixel.y() - v.camera.cy) / v.camera.fy;
    A.row(2 * i) = x * P.row(2) - P.row(0);
    A.row(2 * i + 1) = y * P.row(2) - P.row(1);
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinV);
  const Eigen::Vector4d sv = svd.singularValues();
  if (sv(2) - sv(3) < 1e-12 * std::max(1.0, sv(0)))
    fail(ErrorCode::DegenerateGeometry, "rays are (nearly) parallel");
  const Eigen::Vector4d X = svd.matrixV().col(3);
  if (std::abs(X(3)) < 1e-12 * X.head<3>().norm())
    fail(ErrorCode::DegenerateGeometry, "triangulated point at infinity");
  const Vec3 point = X.head<3>() / X(3);
  for (const auto& v : views)
    if (!(v.pose.transform(point).z() > kMinDepth))
      fail(ErrorCode::DegenerateGeometry, "triangulated point fails cheirality");
  return point;
}

// ---------------------------------------------------------------------------
// Reprojection statistics

struct ReprojectionStats {
  double mean = 0.0;
  double median = 0.0;
  double max = 0.0;
  std::size_t num_observations = 0;
  std::size_t num_skipped = 0;
  std::map<std::int64_t, double> per_point_mean;
};

inline ReprojectionStats reprojection_stats(const Reconstruction& recon) {
  ReprojectionStats stats;
  std::vector<double> errors;
  for (const auto& [id, point] : recon.points()) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& obs : point.track) {
      const Image& img = recon.image(obs.image_id);
      const Vec3 pc = img.pose.transform(point.position);
      if (!(pc.z() > kMinDepth)) {
        ++stats.num_skipped;
        continue;
      }
      const Vec2 proj = project_camera_point(recon.camera(img.camera_id), pc);
      const double e = (proj - recon.keypoint(obs.key()).location).norm();
      errors.push_back(e);
      sum += e;
      ++count;
    }
    if (count > 0) stats.per_point_mean[id] = sum / static_cast<double>(count);
  }
  stats.num_observations = errors.size();
  if (errors.empty()) return stats;
  double total = 0.0;
  for (double e : errors) total += e;
  stats.mean = total / static_cast<double>(errors.size());
  stats.max = *std::max_element(errors.begin(), errors.end());
  std::vector<double> sorted = errors;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  stats.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  return stats;
}

}  // namespace featref
