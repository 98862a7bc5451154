#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "featref/errors.hpp"
#include "featref/scene_model.hpp"

namespace featref {

// 8-bit images are loaded into [0, 1] floats.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;

  GrayImage() = default;
  GrayImage(int w, int h, float fill = 0.0f)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

  float at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  float& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  float clamped(int x, int y) const {
    return at(std::clamp(x, 0, width - 1), std::clamp(y, 0, height - 1));
  }
};

// Row-major, channel-innermost: data[(y * width + x) * channels + c].
// Node (x, y) sits at pixel coordinate (x, y).
struct DenseFeatureMap {
  std::int64_t image_id = 0;
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> data;

  DenseFeatureMap() = default;
  DenseFeatureMap(std::int64_t id, int w, int h, int d)
      : image_id(id), width(w), height(h), channels(d),
        data(static_cast<std::size_t>(w) * h * d, 0.0f) {}

  const float* node(int x, int y) const {
    return data.data() + (static_cast<std::size_t>(y) * width + x) * channels;
  }
  float* node(int x, int y) { return data.data() + (static_cast<std::size_t>(y) * width + x) * channels; }
};

struct FeaturePatch {
  std::int64_t image_id = 0;
  std::int64_t keypoint_id = 0;
  int x0 = 0;  // top-left grid node in image coordinates
  int y0 = 0;
  int size = 0;
  int channels = 0;
  std::vector<float> data;  // size * size * channels, same layout as DenseFeatureMap

  NodeKey key() const { return NodeKey{image_id, keypoint_id}; }
  const float* node(int lx, int ly) const {
    return data.data() + (static_cast<std::size_t>(ly) * size + lx) * channels;
  }
};

// Read-only window onto a feature grid with an integer origin in image coordinates.
struct GridView {
  const float* data = nullptr;
  int origin_x = 0;
  int origin_y = 0;
  int width = 0;
  int height = 0;
  int channels = 0;

  static GridView of(const DenseFeatureMap& m) {
    return GridView{m.data.data(), 0, 0, m.width, m.height, m.channels};
  }
  static GridView of(const FeaturePatch& p) {
    return GridView{p.data.data(), p.x0, p.y0, p.size, p.size, p.channels};
  }

  bool contains(const Vec2& p) const {
    return p.x() >= origin_x && p.y() >= origin_y && p.x() <= origin_x + width - 1 &&
           p.y() <= origin_y + height - 1;
  }
};

namespace detail {

// Catmull-Rom weights for nodes at offsets -1, 0, 1, 2 and their derivatives.
inline void catmull_rom_weights(double t, std::array<double, 4>& w, std::array<double, 4>& dw) {
  const double t2 = t * t;
  const double t3 = t2 * t;
  w[0] = 0.5 * (-t3 + 2.0 * t2 - t);
  w[1] = 0.5 * (3.0 * t3 - 5.0 * t2 + 2.0);
  w[2] = 0.5 * (-3.0 * t3 + 4.0 * t2 + t);
  w[3] = 0.5 * (t3 - t2);
  dw[0] = 0.5 * (-3.0 * t2 + 4.0 * t - 1.0);
  dw[1] = 0.5 * (9.0 * t2 - 10.0 * t);
  dw[2] = 0.5 * (-9.0 * t2 + 8.0 * t + 1.0);
  dw[3] = 0.5 * (3.0 * t2 - 2.0 * t);
}

// Cell index and fractional offset along one axis; the last node maps to t = 1
// of the last cell so every node of the grid is reachable.
inline void locate(double coord, int origin, int extent, int& cell, double& t) {
  const double fl = std::floor(coord);
  cell = static_cast<int>(fl) - origin;
  t = coord - fl;
  if (cell >= extent - 1) {
    cell = extent - 2;
    t = 1.0;
  }
}

}  // namespace detail

// Bicubic (Catmull-Rom) lookup with analytic spatial derivative. Support nodes
// beyond the grid border are clamped. Returns false outside the node domain.
// value, d_dx and d_dy each hold `channels` doubles; derivative pointers may be null.
inline bool interpolate_grid(const GridView& grid, const Vec2& p, double* value, double* d_dx,
                             double* d_dy) {
  if (!std::isfinite(p.x()) || !std::isfinite(p.y()) || !grid.contains(p)) return false;
  int cx, cy;
  double tx, ty;
  detail::locate(p.x(), grid.origin_x, grid.width, cx, tx);
  detail::locate(p.y(), grid.origin_y, grid.height, cy, ty);
  std::array<double, 4> wx, dwx, wy, dwy;
  detail::catmull_rom_weights(tx, wx, dwx);
  detail::catmull_rom_weights(ty, wy, dwy);
  const int D = grid.channels;
  std::fill(value, value + D, 0.0);
  if (d_dx) std::fill(d_dx, d_dx + D, 0.0);
  if (d_dy) std::fill(d_dy, d_dy + D, 0.0);
  for (int j = 0; j < 4; ++j) {
    const int yy = std::clamp(cy - 1 + j, 0, grid.height - 1);
    for (int i = 0; i < 4; ++i) {
      const int xx = std::clamp(cx - 1 + i, 0, grid.width - 1);
      const float* f = grid.data + (static_cast<std::size_t>(yy) * grid.width + xx) * D;
      const double w = wx[i] * wy[j];
      const double wdx = dwx[i] * wy[j];
      const double wdy = wx[i] * dwy[j];
      for (int c = 0; c < D; ++c) {
        const double v = f[c];
        value[c] += w * v;
        if (d_dx) d_dx[c] += wdx * v;
        if (d_dy) d_dy[c] += wdy * v;
      }
    }
  }
  return true;
}

struct FeatureSample {
  Eigen::VectorXd value;
  Eigen::Matrix<double, Eigen::Dynamic, 2> gradient;  // D x 2: d/dx, d/dy
};

inline FeatureSample interpolate(const GridView& grid, const Vec2& p) {
  FeatureSample s;
  s.value.resize(grid.channels);
  s.gradient.resize(grid.channels, 2);
  Eigen::VectorXd dy(grid.channels);
  if (!interpolate_grid(grid, p, s.value.data(), s.gradient.col(0).data(), dy.data()))
    fail(ErrorCode::OutOfPatch, "lookup at (" + std::to_string(p.x()) + ", " +
                                    std::to_string(p.y()) + ") outside the feature grid");
  s.gradient.col(1) = dy;
  return s;
}

inline FeatureSample interpolate(const FeaturePatch& patch, const Vec2& p) {
  return interpolate(GridView::of(patch), p);
}

inline FeatureSample interpolate(const DenseFeatureMap& fmap, const Vec2& p) {
  return interpolate(GridView::of(fmap), p);
}

class FeaturePatchSet {
 public:
  FeaturePatchSet() = default;
  FeaturePatchSet(int size, int channels, std::string extractor = {})
      : size_(size), channels_(channels), extractor_(std::move(extractor)) {}

  int size() const { return size_; }
  int channels() const { return channels_; }
  const std::string& extractor() const { return extractor_; }
  void set_extractor(std::string tag) { extractor_ = std::move(tag); }
  std::size_t count() const { return patches_.size(); }
  bool empty() const { return patches_.empty(); }

  void insert(FeaturePatch patch) {
    if (patches_.empty() && size_ == 0) {
      size_ = patch.size;
      channels_ = patch.channels;
    }
    if (patch.size != size_ || patch.channels != channels_)
      fail(ErrorCode::InvalidArgument, "patch shape does not match the set");
    if (patch.data.size() != static_cast<std::size_t>(patch.size) * patch.size * patch.channels)
      fail(ErrorCode::InvalidArgument, "patch payload has the wrong length");
    const NodeKey key = patch.key();
    patches_[key] = std::move(patch);
  }

  bool contains(const NodeKey& key) const { return patches_.count(key) > 0; }

  const FeaturePatch* find(const NodeKey& key) const {
    auto it = patches_.find(key);
    return it == patches_.end() ? nullptr : &it->second;
  }

  const FeaturePatch& at(const NodeKey& key) const {
    const FeaturePatch* p = find(key);
    if (!p)
      fail(ErrorCode::MissingPatch, "no feature patch for keypoint " +
                                        std::to_string(key.keypoint_id) + " of image " +
                                        std::to_string(key.image_id));
    return *p;
  }

  const std::map<NodeKey, FeaturePatch>& patches() const { return patches_; }

 private:
  int size_ = 0;
  int channels_ = 0;
  std::string extractor_;
  std::map<NodeKey, FeaturePatch> patches_;
};

inline constexpr int kDefaultPatchSize = 16;

inline FeaturePatch extract_patch(const DenseFeatureMap& fmap, const Keypoint& keypoint, int size) {
  if (size < 4 || size % 2 != 0) fail(ErrorCode::InvalidArgument, "patch size must be even and >= 4");
  if (size > fmap.width || size > fmap.height)
    fail(ErrorCode::InvalidArgument, "patch larger than the feature map");
  const Vec2& p = keypoint.initial_location;
  if (!(p.x() >= 0.0 && p.y() >= 0.0 && p.x() <= fmap.width - 1 && p.y() <= fmap.height - 1))
    fail(ErrorCode::KeypointOutOfBounds,
         "keypoint " + std::to_string(keypoint.keypoint_id) + " outside feature map");
  FeaturePatch patch;
  patch.image_id = fmap.image_id;
  patch.keypoint_id = keypoint.keypoint_id;
  patch.size = size;
  patch.channels = fmap.channels;
  patch.x0 = std::clamp(static_cast<int>(std::floor(p.x() + 0.5)) - size / 2, 0, fmap.width - size);
  patch.y0 = std::clamp(static_cast<int>(std::floor(p.y() + 0.5)) - size / 2, 0, fmap.height - size);
  patch.data.resize(static_cast<std::size_t>(size) * size * fmap.channels);
  const std::size_t row = static_cast<std::size_t>(size) * fmap.channels;
  for (int ly = 0; ly < size; ++ly) {
    const float* src = fmap.node(patch.x0, patch.y0 + ly);
    std::copy(src, src + row, patch.data.begin() + static_cast<std::ptrdiff_t>(ly * row));
  }
  return patch;
}

inline std::vector<FeaturePatch> extract_patches(const DenseFeatureMap& fmap,
                                                 const std::vector<Keypoint>& keypoints,
                                                 int size = kDefaultPatchSize) {
  std::vector<FeaturePatch> out;
  out.reserve(keypoints.size());
  for (const auto& kp : keypoints) out.push_back(extract_patch(fmap, kp, size));
  return out;
}

// ---------------------------------------------------------------------------
// Built-in dense extractors

inline constexpr double kNormalizationEpsilon = 1e-6;

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma, int radius, bool derivative) {
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  if (derivative) {
    // Normalized so a unit ramp has unit derivative.
    double moment = 0.0;
    for (int i = -radius; i <= radius; ++i) moment += i * i * k[i + radius];
    std::vector<double> d(k.size());
    for (int i = -radius; i <= radius; ++i) d[i + radius] = i * k[i + radius] / moment;
    return d;
  }
  return k;
}

// out(x, y) = sum_k kernel[k] * in(x + k - r, y) (horizontal) or along y.
inline std::vector<double> correlate(const std::vector<double>& in, int w, int h,
                                     const std::vector<double>& kernel, bool horizontal,
                                     bool antisymmetric = false) {
  const int r = static_cast<int>(kernel.size() / 2);
  std::vector<double> out(in.size(), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      auto sample = [&](int k) {
        const int xx = horizontal ? std::clamp(x + k, 0, w - 1) : x;
        const int yy = horizontal ? y : std::clamp(y + k, 0, h - 1);
        return in[static_cast<std::size_t>(yy) * w + xx];
      };
      double acc = 0.0;
      if (antisymmetric) {
        // Pairwise differences make flat regions exactly zero.
        for (int k = 1; k <= r; ++k) acc += kernel[k + r] * (sample(k) - sample(-k));
      } else {
        for (int k = -r; k <= r; ++k) acc += kernel[k + r] * sample(k);
      }
      out[static_cast<std::size_t>(y) * w + x] = acc;
    }
  return out;
}

}  // namespace detail

// Channels: smoothed intensity, d/dx, d/dy (Gaussian derivative, sigma = 1).
inline DenseFeatureMap extract_gradient_features(const GrayImage& image, std::int64_t image_id = 0) {
  if (image.width < 8 || image.height < 8) fail(ErrorCode::InvalidArgument, "image smaller than 8x8");
  const int w = image.width, h = image.height;
  constexpr double sigma = 1.0;
  constexpr int radius = 3;
  const auto g = detail::gaussian_kernel(sigma, radius, false);
  const auto dg = detail::gaussian_kernel(sigma, radius, true);
  const std::vector<double> in(image.pixels.begin(), image.pixels.end());
  const auto smooth_x = detail::correlate(in, w, h, g, true);
  const auto smooth = detail::correlate(smooth_x, w, h, g, false);
  const auto gx = detail::correlate(detail::correlate(in, w, h, dg, true, true), w, h, g, false);
  const auto gy = detail::correlate(smooth_x, w, h, dg, false, true);
  DenseFeatureMap out(image_id, w, h, 3);
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double f[3] = {smooth[i], gx[i], gy[i]};
    const double n = std::sqrt(f[0] * f[0] + f[1] * f[1] + f[2] * f[2]);
    float* dst = out.data.data() + 3 * i;
    if (n < kNormalizationEpsilon) {
      dst[0] = 1.0f;
      dst[1] = dst[2] = 0.0f;
    } else {
      for (int c = 0; c < 3; ++c) dst[c] = static_cast<float>(f[c] / n);
    }
  }
  return out;
}

// Channels: the window x window neighbourhood (row-major), mean-subtracted and
// L2-normalized. Textureless windows map to the zero vector.
inline DenseFeatureMap extract_ncc_intensity(const GrayImage& image, int window,
                                             std::int64_t image_id = 0) {
  if (window < 3 || window > 11 || window % 2 == 0)
    fail(ErrorCode::InvalidArgument, "NCC window must be odd and in [3, 11]");
  const int r = window / 2;
  const int D = window * window;
  DenseFeatureMap out(image_id, image.width, image.height, D);
  std::vector<double> v(D);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      double mean = 0.0;
      int k = 0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          v[k] = image.clamped(x + dx, y + dy);
          mean += v[k++];
        }
      mean /= D;
      double sq = 0.0;
      for (double& e : v) {
        e -= mean;
        sq += e * e;
      }
      const double n = std::sqrt(sq);
      float* dst = out.node(x, y);
      for (int c = 0; c < D; ++c)
        dst[c] = n < kNormalizationEpsilon ? 0.0f : static_cast<float>(v[c] / n);
    }
  return out;
}

}  // namespace featref
