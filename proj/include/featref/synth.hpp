#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "featref/errors.hpp"
#include "featref/feature_store.hpp"
#include "featref/match_graph.hpp"
#include "featref/parallel.hpp"
#include "featref/scene_model.hpp"

namespace featref {

enum class FieldKind { GaussianBlobs, PerlinLike };

inline std::string to_string(FieldKind k) { return k == FieldKind::GaussianBlobs ? "gaussian_blobs" : "perlin_like"; }

inline FieldKind parse_field_kind(const std::string& s) {
  if (s == "gaussian_blobs" || s == "GaussianBlobs") return FieldKind::GaussianBlobs;
  if (s == "perlin_like" || s == "PerlinLike") return FieldKind::PerlinLike;
  fail(ErrorCode::ConfigInvalid, "unknown feature field '" + s + "'");
}

// Multi-channel feature field on the plane Z = 0, L2-normalized per sample.
class FeatureField {
 public:
  FeatureField() = default;

  // spacing: lattice step between blobs (or the shortest wavelength scale) in
  // world units; extent: half-size of the textured square.
  FeatureField(FieldKind kind, int dim, double spacing, double extent, std::uint64_t seed)
      : kind_(kind), dim_(dim), spacing_(spacing), extent_(extent) {
    if (dim <= 0 || !(spacing > 0.0) || !(extent > 0.0))
      fail(ErrorCode::ConfigInvalid, "feature field needs positive dimension, spacing and extent");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    bias_.resize(dim);
    for (int c = 0; c < dim; ++c) bias_(c) = 0.3 * normal(rng);
    if (kind == FieldKind::GaussianBlobs) {
      cells_ = static_cast<int>(std::ceil(2.0 * (extent + 4.0 * spacing) / spacing));
      origin_ = -(extent + 4.0 * spacing);
      blobs_.resize(static_cast<std::size_t>(cells_) * cells_);
      for (int j = 0; j < cells_; ++j)
        for (int i = 0; i < cells_; ++i) {
          Blob& b = blobs_[static_cast<std::size_t>(j) * cells_ + i];
          b.center = Vec2(origin_ + (i + 0.1 + 0.8 * uni(rng)) * spacing, origin_ + (j + 0.1 + 0.8 * uni(rng)) * spacing);
          const double major = spacing * (0.45 + 0.35 * uni(rng));
          const double minor = spacing * (0.25 + 0.2 * uni(rng));
          const double angle = M_PI * uni(rng);
          Eigen::Matrix2d R;
          R << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle);
          const Eigen::Matrix2d S = Eigen::Vector2d(1.0 / (major * major), 1.0 / (minor * minor)).asDiagonal();
          b.precision = R * S * R.transpose();
          b.amplitude.resize(dim);
          for (int c = 0; c < dim; ++c) b.amplitude(c) = normal(rng);
        }
      reach_ = 5;  // 4 major sigmas (<= 0.8 spacing) plus center jitter
    } else {
      const int waves = 6;
      for (int k = 0; k < waves; ++k) {
        Wave w;
        const double angle = 2.0 * M_PI * uni(rng);
        const double wavelength = spacing * (1.5 + 3.0 * uni(rng));
        w.direction = (2.0 * M_PI / wavelength) * Vec2(std::cos(angle), std::sin(angle));
        w.phase.resize(dim);
        w.amplitude.resize(dim);
        for (int c = 0; c < dim; ++c) {
          w.phase(c) = 2.0 * M_PI * uni(rng);
          w.amplitude(c) = normal(rng);
        }
        waves_.push_back(std::move(w));
      }
    }
  }

  FieldKind kind() const { return kind_; }
  int dim() const { return dim_; }
  double spacing() const { return spacing_; }
  double extent() const { return extent_; }

  void evaluate(const Vec2& q, float* out) const {
    Eigen::VectorXd v = raw(q);
    const double n = v.norm();
    if (n > 1e-12) v /= n;
    for (int c = 0; c < dim_; ++c) out[c] = static_cast<float>(v(c));
  }

  Eigen::VectorXd evaluate(const Vec2& q) const {
    std::vector<float> f(static_cast<std::size_t>(dim_));
    evaluate(q, f.data());
    return Eigen::Map<const Eigen::VectorXf>(f.data(), dim_).cast<double>();
  }

 private:
  struct Blob {
    Vec2 center;
    Eigen::Matrix2d precision;
    Eigen::VectorXd amplitude;
  };
  struct Wave {
    Vec2 direction;
    Eigen::VectorXd phase;
    Eigen::VectorXd amplitude;
  };

  Eigen::VectorXd raw(const Vec2& q) const {
    Eigen::VectorXd v = bias_;
    if (kind_ == FieldKind::GaussianBlobs) {
      const int ci = static_cast<int>(std::floor((q.x() - origin_) / spacing_));
      const int cj = static_cast<int>(std::floor((q.y() - origin_) / spacing_));
      for (int j = std::max(0, cj - reach_); j <= std::min(cells_ - 1, cj + reach_); ++j)
        for (int i = std::max(0, ci - reach_); i <= std::min(cells_ - 1, ci + reach_); ++i) {
          const Blob& b = blobs_[static_cast<std::size_t>(j) * cells_ + i];
          const Vec2 d = q - b.center;
          const double e = d.dot(b.precision * d);
          if (e < 32.0) v += std::exp(-0.5 * e) * b.amplitude;
        }
    } else {
      for (const Wave& w : waves_) {
        const double s = w.direction.dot(q);
        for (int c = 0; c < dim_; ++c) v(c) += w.amplitude(c) * std::sin(s + w.phase(c));
      }
    }
    return v;
  }

  FieldKind kind_ = FieldKind::GaussianBlobs;
  int dim_ = 0;
  double spacing_ = 1.0;
  double extent_ = 1.0;
  Eigen::VectorXd bias_;
  double origin_ = 0.0;
  int cells_ = 0;
  int reach_ = 0;
  std::vector<Blob> blobs_;
  std::vector<Wave> waves_;
};

// Intersection of a pixel ray with the plane Z = 0; false if the ray misses.
inline bool plane_hit(const Pose& pose, const Camera& camera, const Vec2& pixel, Vec3& hit) {
  const Vec3 origin = pose.center();
  const Vec3 ray = pixel_ray(pose, camera, pixel);
  if (std::abs(ray.z()) < 1e-12) return false;
  const double s = -origin.z() / ray.z();
  if (!(s > 0.0)) return false;
  hit = origin + s * ray;
  return true;
}

// Feature seen at a pixel through the plane; rays that miss see the bias only.
inline void render_pixel(const FeatureField& field, const Pose& pose, const Camera& camera, const Vec2& pixel,
                         float* out) {
  Vec3 hit;
  if (!plane_hit(pose, camera, pixel, hit)) hit = Vec3(1e9, 1e9, 0.0);
  field.evaluate(hit.head<2>(), out);
}

inline DenseFeatureMap render_feature_map(const FeatureField& field, const Pose& pose, const Camera& camera,
                                          std::int64_t image_id, int num_threads = 1) {
  DenseFeatureMap m(image_id, camera.width, camera.height, field.dim());
  parallel_for(static_cast<std::size_t>(camera.height), num_threads, [&](std::size_t y) {
    for (int x = 0; x < camera.width; ++x)
      render_pixel(field, pose, camera, Vec2(x, static_cast<double>(y)), m.node(x, static_cast<int>(y)));
  });
  return m;
}

// Same corner rule and bounds as extract_patch, rendered directly from the field.
inline FeaturePatch render_patch(const FeatureField& field, const Pose& pose, const Camera& camera,
                                 const Keypoint& kp, int size) {
  if (size < 4 || size > camera.width || size > camera.height)
    fail(ErrorCode::InvalidArgument, "patch size must be in [4, image size]");
  const Vec2 p = kp.location;
  if (!(p.x() >= 0.0 && p.y() >= 0.0 && p.x() <= camera.width - 1 && p.y() <= camera.height - 1))
    fail(ErrorCode::KeypointOutOfBounds, "keypoint outside the image");
  FeaturePatch patch;
  patch.image_id = kp.image_id;
  patch.keypoint_id = kp.keypoint_id;
  patch.size = size;
  patch.channels = field.dim();
  patch.x0 = std::clamp(static_cast<int>(std::floor(p.x() + 0.5)) - size / 2, 0, camera.width - size);
  patch.y0 = std::clamp(static_cast<int>(std::floor(p.y() + 0.5)) - size / 2, 0, camera.height - size);
  patch.data.resize(static_cast<std::size_t>(size) * size * field.dim());
  for (int ly = 0; ly < size; ++ly)
    for (int lx = 0; lx < size; ++lx)
      render_pixel(field, pose, camera, Vec2(patch.x0 + lx, patch.y0 + ly),
                   patch.data.data() + (static_cast<std::size_t>(ly) * size + lx) * field.dim());
  return patch;
}

// Patches around every keypoint of the reconstruction.
inline FeaturePatchSet render_patches(const FeatureField& field, const Reconstruction& recon, int size,
                                      int num_threads = 1) {
  std::vector<const Keypoint*> kps;
  std::vector<const Image*> owner;
  for (const auto& [id, img] : recon.images())
    for (const auto& kp : img.keypoints) {
      kps.push_back(&kp);
      owner.push_back(&img);
    }
  std::vector<FeaturePatch> patches(kps.size());
  parallel_for(kps.size(), num_threads, [&](std::size_t i) {
    patches[i] = render_patch(field, owner[i]->pose, recon.camera(owner[i]->camera_id), *kps[i], size);
  });
  FeaturePatchSet set(size, field.dim(), "synthetic");
  for (auto& p : patches) set.insert(std::move(p));
  return set;
}

// Grayscale rendering of the first feature channel, for the image extractors.
inline GrayImage render_image(const FeatureField& field, const Pose& pose, const Camera& camera) {
  GrayImage img(camera.width, camera.height);
  std::vector<float> f(static_cast<std::size_t>(field.dim()));
  for (int y = 0; y < camera.height; ++y)
    for (int x = 0; x < camera.width; ++x) {
      render_pixel(field, pose, camera, Vec2(x, y), f.data());
      img.at(x, y) = std::clamp(0.5f + 0.5f * f[0], 0.0f, 1.0f);
    }
  return img;
}

// Where the surface point seen at `location` in image `from` appears in image
// `to`, using the true poses. Fails with DegenerateGeometry if the ray misses.
inline Vec2 plane_transfer(const Reconstruction& truth, std::int64_t from, const Vec2& location, std::int64_t to) {
  Vec3 hit;
  if (!plane_hit(truth.image(from).pose, truth.camera_of(from), location, hit))
    fail(ErrorCode::DegenerateGeometry, "ray does not meet the scene plane");
  return project(truth.image(to).pose, truth.camera_of(to), hit);
}

struct SynthConfig {
  int n_cameras = 10;
  int n_points = 200;
  int width = 640;
  int height = 480;
  double focal = 500.0;             // pixels
  double keypoint_noise = 2.0;      // sigma, pixels
  double outlier_rate = 0.05;       // injected outlier matches per true match
  FieldKind field = FieldKind::GaussianBlobs;
  int feature_dim = 8;
  std::uint64_t seed = 1;
  double scene_extent = 3.0;        // points on [-e, e]^2 of the plane
  double camera_distance = 10.0;    // height of the camera ring above the plane
  double camera_spread = 3.0;       // ring radius
  double blob_spacing_px = 12.0;    // field scale as seen from camera_distance
  double pose_noise_deg = 0.0;
  double pose_noise_trans = 0.0;    // fraction of |t|
  int patch_size = kDefaultPatchSize;
  int image_margin = kDefaultPatchSize / 2 + 1;  // visibility margin, pixels

  void validate() const {
    auto bad = [](const std::string& what) { fail(ErrorCode::ConfigInvalid, what); };
    if (n_cameras < 2) bad("n_cameras must be >= 2");
    if (n_points < 1) bad("n_points must be >= 1");
    if (width < 16 || height < 16) bad("image size must be at least 16x16");
    if (!(focal > 0.0)) bad("focal must be positive");
    if (!(keypoint_noise >= 0.0)) bad("keypoint_noise must be >= 0");
    if (!(outlier_rate >= 0.0 && outlier_rate <= 1.0)) bad("outlier_rate must be in [0, 1]");
    if (feature_dim < 1) bad("feature_dim must be >= 1");
    if (!(scene_extent > 0.0) || !(camera_distance > 0.0) || !(camera_spread >= 0.0)) bad("bad scene geometry");
    if (!(blob_spacing_px > 0.0)) bad("blob_spacing_px must be positive");
    if (!(pose_noise_deg >= 0.0) || !(pose_noise_trans >= 0.0)) bad("pose noise must be >= 0");
    if (patch_size < 4 || patch_size > std::min(width, height)) bad("patch_size out of range");
    if (image_margin < 0 || 2 * image_margin >= std::min(width, height)) bad("image_margin out of range");
  }
};

struct SynthScene {
  SynthConfig config;
  FeatureField field;
  Reconstruction truth;
  Reconstruction perturbed;  // noisy keypoints (and poses), points re-triangulated
  std::vector<Match> matches;
  std::size_t num_true_matches = 0;
  std::size_t num_outlier_matches = 0;
};

inline Pose perturb_pose(const Pose& pose, double rot_deg, double trans_frac, std::mt19937_64& rng) {
  if (rot_deg == 0.0 && trans_frac == 0.0) return pose;
  std::normal_distribution<double> n(0.0, 1.0);
  const Vec3 axis = Vec3(n(rng), n(rng), n(rng)).normalized();
  const Vec3 dir = Vec3(n(rng), n(rng), n(rng)).normalized();
  Pose out = pose;
  out.rotation = orthonormalize(rotation_exp(axis * rot_deg * M_PI / 180.0) * pose.rotation);
  out.translation = pose.translation + trans_frac * pose.translation.norm() * dir;
  return out;
}

inline SynthScene synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  SynthScene scene;
  scene.config = cfg;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  const double spacing = cfg.blob_spacing_px * cfg.camera_distance / cfg.focal;
  const double fov_half = 0.5 * std::max(cfg.width, cfg.height) * cfg.camera_distance / cfg.focal;
  scene.field = FeatureField(cfg.field, cfg.feature_dim, spacing, cfg.scene_extent + cfg.camera_spread + fov_half,
                             rng());

  const Camera cam = Camera::simple_pinhole(1, cfg.width, cfg.height, cfg.focal, 0.5 * (cfg.width - 1),
                                            0.5 * (cfg.height - 1));
  scene.truth.add_camera(cam);
  scene.perturbed.add_camera(cam);

  std::vector<Pose> poses;
  for (int i = 0; i < cfg.n_cameras; ++i) {
    const double angle = 2.0 * M_PI * i / cfg.n_cameras + 0.3 * uni(rng);
    const double radius = cfg.camera_spread * (0.5 + 0.5 * uni(rng));
    const Vec3 eye(radius * std::cos(angle), radius * std::sin(angle), cfg.camera_distance * (0.9 + 0.2 * uni(rng)));
    const Vec3 target(0.3 * cfg.scene_extent * (uni(rng) - 0.5), 0.3 * cfg.scene_extent * (uni(rng) - 0.5), 0.0);
    poses.push_back(Pose::look_at(eye, target, Vec3::UnitY()));
  }

  std::vector<Vec3> points;
  for (int j = 0; j < cfg.n_points; ++j)
    points.emplace_back(cfg.scene_extent * (2.0 * uni(rng) - 1.0), cfg.scene_extent * (2.0 * uni(rng) - 1.0), 0.0);

  // Observations: (image index, point index, true pixel).
  std::vector<std::vector<std::pair<int, Vec2>>> per_image(static_cast<std::size_t>(cfg.n_cameras));
  const double m = cfg.image_margin;
  for (int j = 0; j < cfg.n_points; ++j)
    for (int i = 0; i < cfg.n_cameras; ++i) {
      const Vec3 pc = poses[static_cast<std::size_t>(i)].transform(points[static_cast<std::size_t>(j)]);
      if (!(pc.z() > kMinDepth)) continue;
      const Vec2 px = project_camera_point(cam, pc);
      if (px.x() < m || px.y() < m || px.x() > cfg.width - 1 - m || px.y() > cfg.height - 1 - m) continue;
      per_image[static_cast<std::size_t>(i)].emplace_back(j, px);
    }

  std::vector<std::vector<Observation>> tracks(static_cast<std::size_t>(cfg.n_points));
  for (int i = 0; i < cfg.n_cameras; ++i) {
    Image gt, noisy;
    gt.image_id = noisy.image_id = i + 1;
    gt.camera_id = noisy.camera_id = cam.camera_id;
    gt.name = noisy.name = "image_" + std::to_string(i + 1) + ".pgm";
    gt.pose = poses[static_cast<std::size_t>(i)];
    noisy.pose = i == 0 ? gt.pose : perturb_pose(gt.pose, cfg.pose_noise_deg, cfg.pose_noise_trans, rng);
    for (const auto& [j, px] : per_image[static_cast<std::size_t>(i)]) {
      const std::int64_t k = gt.add_keypoint(px);
      Vec2 q = px + cfg.keypoint_noise * Vec2(normal(rng), normal(rng));
      q.x() = std::clamp(q.x(), 0.0, cfg.width - 1.0);
      q.y() = std::clamp(q.y(), 0.0, cfg.height - 1.0);
      noisy.add_keypoint(q);
      tracks[static_cast<std::size_t>(j)].push_back(Observation{gt.image_id, k});
    }
    scene.truth.add_image(gt);
    scene.perturbed.add_image(noisy);
  }

  std::int64_t next_id = 1;
  for (int j = 0; j < cfg.n_points; ++j) {
    const auto& track = tracks[static_cast<std::size_t>(j)];
    if (track.size() < 2) continue;
    Point3D gt;
    gt.point_id = next_id++;
    gt.position = points[static_cast<std::size_t>(j)];
    gt.track = track;
    const Eigen::VectorXd f = scene.field.evaluate(gt.position.head<2>());
    const std::uint8_t gray = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(0.5 + 0.5 * f(0), 0.0, 1.0)));
    gt.color = {gray, gray, gray};
    scene.truth.add_point(gt);

    Point3D noisy = gt;
    std::vector<TriangulationView> views;
    for (const auto& obs : track)
      views.push_back(TriangulationView{scene.perturbed.keypoint(obs.key()).location,
                                        scene.perturbed.image(obs.image_id).pose, cam});
    const bool exact = cfg.keypoint_noise == 0.0 && cfg.pose_noise_deg == 0.0 && cfg.pose_noise_trans == 0.0;
    try {
      if (!exact) noisy.position = triangulate_dlt(views);
    } catch (const Error&) {
      noisy.position = gt.position;  // degenerate view set; keep the true point
    }
    scene.perturbed.add_point(noisy);
  }

  // True matches: every pair within a track. Outliers: random cross-image pairs.
  std::set<std::pair<NodeKey, NodeKey>> used;
  for (const auto& [id, point] : scene.truth.points())
    for (std::size_t a = 0; a < point.track.size(); ++a)
      for (std::size_t b = a + 1; b < point.track.size(); ++b) {
        Match mt{point.track[a].key(), point.track[b].key(), 0.6 + 0.4 * uni(rng)};
        mt = canonical(mt);
        used.insert({mt.a, mt.b});
        scene.matches.push_back(mt);
      }
  scene.num_true_matches = scene.matches.size();
  const auto want = static_cast<std::size_t>(std::llround(cfg.outlier_rate * static_cast<double>(scene.num_true_matches)));
  std::vector<NodeKey> all_keys;
  for (const auto& [id, img] : scene.truth.images())
    for (const auto& kp : img.keypoints) all_keys.push_back(kp.key());
  std::uniform_int_distribution<std::size_t> pick(0, all_keys.empty() ? 0 : all_keys.size() - 1);
  std::size_t attempts = 0;
  while (scene.num_outlier_matches < want && attempts < 100 * (want + 1) && all_keys.size() > 1) {
    ++attempts;
    const NodeKey a = all_keys[pick(rng)], b = all_keys[pick(rng)];
    if (a.image_id == b.image_id) continue;
    const Match mt = canonical(Match{a, b, 0.05 + 0.45 * uni(rng)});
    if (!used.insert({mt.a, mt.b}).second) continue;
    scene.matches.push_back(mt);
    ++scene.num_outlier_matches;
  }
  return scene;
}

}  // namespace featref
