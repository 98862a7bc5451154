#pragma once

#include <Eigen/Geometry>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "featref/errors.hpp"
#include "featref/feature_store.hpp"
#include "featref/match_graph.hpp"
#include "featref/scene_model.hpp"

namespace featref {

namespace fs = std::filesystem;

namespace detail {

inline std::string fmt12(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoError, "write failed for " + path.string());
}

[[noreturn]] inline void parse_fail(const fs::path& file, std::size_t line, const std::string& what) {
  fail(ErrorCode::ParseError, file.string() + ":" + std::to_string(line) + ": " + what);
}

// Whitespace-separated tokens of one text line.
inline std::vector<std::string> tokens(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string t;
  while (ss >> t) out.push_back(t);
  return out;
}

template <typename T>
T parse_number(const std::string& s, const fs::path& file, std::size_t line) {
  std::istringstream ss(s);
  T v{};
  ss >> v;
  if (ss.fail() || !ss.eof()) parse_fail(file, line, "expected a number, got '" + s + "'");
  return v;
}

inline bool skip_line(const std::string& line) {
  const auto p = line.find_first_not_of(" \t\r");
  return p == std::string::npos || line[p] == '#';
}

// Text lines with their 1-based numbers.
inline std::vector<std::pair<std::size_t, std::string>> numbered_lines(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::vector<std::pair<std::size_t, std::string>> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.emplace_back(n, line);
  }
  return out;
}

// Little-endian byte packing.
class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    using U = std::make_unsigned_t<T>;
    U u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes_.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
  }
  void put_f32(float f) { put(std::bit_cast<std::uint32_t>(f)); }
  void put_raw(const char* s, std::size_t n) { bytes_.append(s, n); }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::string& bytes, fs::path path) : bytes_(bytes), path_(std::move(path)) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }
  void require(std::size_t n, const std::string& what) const {
    if (remaining() < n)
      fail(ErrorCode::TruncatedPayload, path_.string() + ": " + what + " needs " + std::to_string(n) +
                                            " bytes, " + std::to_string(remaining()) + " left");
  }
  template <typename T>
  T get() {
    require(sizeof(T), "field");
    using U = std::make_unsigned_t<T>;
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      u |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i));
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  std::string get_raw(std::size_t n) {
    require(n, "field");
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  const std::string& bytes_;
  fs::path path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// COLMAP text model: cameras.txt, images.txt, points3D.txt

inline std::string camera_model_name(CameraModel m) {
  return m == CameraModel::SimplePinhole ? "SIMPLE_PINHOLE" : "PINHOLE";
}

inline Eigen::Quaterniond canonical_quaternion(const Mat3& R) {
  Eigen::Quaterniond q(R);
  q.normalize();
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();
  return q;
}

inline Reconstruction read_model(const fs::path& dir) {
  Reconstruction recon;
  const fs::path cameras = dir / "cameras.txt", images = dir / "images.txt", points = dir / "points3D.txt";

  for (const auto& [n, line] : detail::numbered_lines(cameras)) {
    if (detail::skip_line(line)) continue;
    const auto t = detail::tokens(line);
    if (t.size() < 4) detail::parse_fail(cameras, n, "camera line needs CAMERA_ID MODEL WIDTH HEIGHT PARAMS...");
    const auto id = detail::parse_number<std::int64_t>(t[0], cameras, n);
    const int w = detail::parse_number<int>(t[2], cameras, n);
    const int h = detail::parse_number<int>(t[3], cameras, n);
    std::vector<double> p;
    for (std::size_t i = 4; i < t.size(); ++i) p.push_back(detail::parse_number<double>(t[i], cameras, n));
    Camera cam;
    if (t[1] == "SIMPLE_PINHOLE") {
      if (p.size() != 3) detail::parse_fail(cameras, n, "SIMPLE_PINHOLE takes 3 parameters");
      cam = Camera::simple_pinhole(id, w, h, p[0], p[1], p[2]);
    } else if (t[1] == "PINHOLE") {
      if (p.size() != 4) detail::parse_fail(cameras, n, "PINHOLE takes 4 parameters");
      cam = Camera::pinhole(id, w, h, p[0], p[1], p[2], p[3]);
    } else {
      fail(ErrorCode::UnknownCameraModel, cameras.string() + ":" + std::to_string(n) + ": unsupported model " + t[1]);
    }
    if (recon.cameras().count(id)) detail::parse_fail(cameras, n, "duplicate camera id");
    recon.add_camera(cam);
  }

  // Point ids referenced from images.txt, checked against points3D.txt below.
  struct PointRef {
    NodeKey key;
    std::size_t line;
    std::int64_t point_id;
  };
  std::vector<PointRef> image_refs;
  const auto lines = detail::numbered_lines(images);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto& [n, line] = lines[i];
    if (detail::skip_line(line)) continue;
    const auto t = detail::tokens(line);
    if (t.size() != 10)
      detail::parse_fail(images, n, "image line needs IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME");
    Image img;
    img.image_id = detail::parse_number<std::int64_t>(t[0], images, n);
    double v[7];
    for (int k = 0; k < 7; ++k) v[k] = detail::parse_number<double>(t[static_cast<std::size_t>(1 + k)], images, n);
    const Eigen::Quaterniond q(v[0], v[1], v[2], v[3]);
    if (!(q.norm() > 0.0)) detail::parse_fail(images, n, "zero quaternion");
    img.pose.rotation = q.normalized().toRotationMatrix();
    img.pose.translation = Vec3(v[4], v[5], v[6]);
    img.camera_id = detail::parse_number<std::int64_t>(t[8], images, n);
    img.name = t[9];
    if (i + 1 >= lines.size()) detail::parse_fail(images, n, "missing keypoint line");
    const auto& [n2, kp_line] = lines[++i];
    const auto kt = detail::tokens(kp_line);
    if (kt.size() % 3 != 0) detail::parse_fail(images, n2, "keypoint line needs X Y POINT3D_ID triples");
    for (std::size_t k = 0; k < kt.size(); k += 3) {
      const Vec2 p(detail::parse_number<double>(kt[k], images, n2), detail::parse_number<double>(kt[k + 1], images, n2));
      const auto pid = detail::parse_number<std::int64_t>(kt[k + 2], images, n2);
      const std::int64_t kid = img.add_keypoint(p);
      if (pid < -1) detail::parse_fail(images, n2, "negative point id");
      if (pid != -1) image_refs.push_back(PointRef{NodeKey{img.image_id, kid}, n2, pid});
    }
    if (recon.images().count(img.image_id)) detail::parse_fail(images, n, "duplicate image id");
    if (!recon.cameras().count(img.camera_id))
      fail(ErrorCode::DanglingReference, images.string() + ":" + std::to_string(n) + ": unknown camera " +
                                             std::to_string(img.camera_id));
    recon.add_image(std::move(img));
  }

  for (const auto& [n, line] : detail::numbered_lines(points)) {
    if (detail::skip_line(line)) continue;
    const auto t = detail::tokens(line);
    if (t.size() < 8 || (t.size() - 8) % 2 != 0)
      detail::parse_fail(points, n, "point line needs POINT3D_ID X Y Z R G B ERROR (IMAGE_ID POINT2D_IDX)...");
    Point3D p;
    p.point_id = detail::parse_number<std::int64_t>(t[0], points, n);
    p.position = Vec3(detail::parse_number<double>(t[1], points, n), detail::parse_number<double>(t[2], points, n),
                      detail::parse_number<double>(t[3], points, n));
    for (int c = 0; c < 3; ++c) {
      const int v = detail::parse_number<int>(t[static_cast<std::size_t>(4 + c)], points, n);
      if (v < 0 || v > 255) detail::parse_fail(points, n, "color out of range");
      p.color[static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(v);
    }
    p.error = detail::parse_number<double>(t[7], points, n);
    for (std::size_t k = 8; k < t.size(); k += 2)
      p.track.push_back(Observation{detail::parse_number<std::int64_t>(t[k], points, n),
                                    detail::parse_number<std::int64_t>(t[k + 1], points, n)});
    if (recon.points().count(p.point_id)) detail::parse_fail(points, n, "duplicate point id");
    try {
      recon.add_point(p);
    } catch (const Error& e) {
      fail(e.code(), points.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }

  const auto k2p = recon.keypoint_to_point();
  for (const PointRef& ref : image_refs) {
    if (!recon.points().count(ref.point_id))
      fail(ErrorCode::DanglingReference, images.string() + ":" + std::to_string(ref.line) + ": unknown point " +
                                             std::to_string(ref.point_id));
    auto it = k2p.find(ref.key);
    if (it == k2p.end() || it->second != ref.point_id)
      detail::parse_fail(images, ref.line, "keypoint " + std::to_string(ref.key.keypoint_id) + " claims point " +
                                               std::to_string(ref.point_id) + " but is not in its track");
  }
  if (k2p.size() != image_refs.size())
    detail::parse_fail(points, 0, "a track references a keypoint whose POINT3D_ID is -1 or another point");
  return recon;
}

inline void write_model(const Reconstruction& recon, const fs::path& dir) {
  fs::create_directories(dir);
  std::ostringstream cams;
  cams << "# Camera list with one line of data per camera:\n"
       << "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n"
       << "# Number of cameras: " << recon.cameras().size() << "\n";
  for (const auto& [id, c] : recon.cameras()) {
    cams << id << ' ' << camera_model_name(c.model) << ' ' << c.width << ' ' << c.height;
    if (c.model == CameraModel::SimplePinhole)
      cams << ' ' << detail::fmt12(c.fx);
    else
      cams << ' ' << detail::fmt12(c.fx) << ' ' << detail::fmt12(c.fy);
    cams << ' ' << detail::fmt12(c.cx) << ' ' << detail::fmt12(c.cy) << '\n';
  }
  detail::write_file(dir / "cameras.txt", cams.str());

  const auto k2p = recon.keypoint_to_point();
  std::ostringstream imgs;
  imgs << "# Image list with two lines of data per image:\n"
       << "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n"
       << "#   POINTS2D[] as (X, Y, POINT3D_ID)\n"
       << "# Number of images: " << recon.images().size() << "\n";
  for (const auto& [id, img] : recon.images()) {
    const Eigen::Quaterniond q = canonical_quaternion(img.pose.rotation);
    imgs << id << ' ' << detail::fmt12(q.w()) << ' ' << detail::fmt12(q.x()) << ' ' << detail::fmt12(q.y()) << ' '
         << detail::fmt12(q.z()) << ' ' << detail::fmt12(img.pose.translation.x()) << ' '
         << detail::fmt12(img.pose.translation.y()) << ' ' << detail::fmt12(img.pose.translation.z()) << ' '
         << img.camera_id << ' ' << img.name << '\n';
    for (std::size_t k = 0; k < img.keypoints.size(); ++k) {
      const auto& kp = img.keypoints[k];
      auto it = k2p.find(kp.key());
      if (k) imgs << ' ';
      imgs << detail::fmt12(kp.location.x()) << ' ' << detail::fmt12(kp.location.y()) << ' '
           << (it == k2p.end() ? std::int64_t{-1} : it->second);
    }
    imgs << '\n';
  }
  detail::write_file(dir / "images.txt", imgs.str());

  std::ostringstream pts;
  pts << "# 3D point list with one line of data per point:\n"
      << "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n"
      << "# Number of points: " << recon.points().size() << "\n";
  for (const auto& [id, p] : recon.points()) {
    pts << id << ' ' << detail::fmt12(p.position.x()) << ' ' << detail::fmt12(p.position.y()) << ' '
        << detail::fmt12(p.position.z()) << ' ' << int(p.color[0]) << ' ' << int(p.color[1]) << ' '
        << int(p.color[2]) << ' ' << detail::fmt12(p.error);
    for (const auto& o : p.track) pts << ' ' << o.image_id << ' ' << o.keypoint_id;
    pts << '\n';
  }
  detail::write_file(dir / "points3D.txt", pts.str());
}

// ---------------------------------------------------------------------------
// FMAP / FPAT binaries

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

inline std::string encode_fmap(const DenseFeatureMap& m) {
  if (m.data.size() != static_cast<std::size_t>(m.width) * m.height * m.channels)
    fail(ErrorCode::InvalidArgument, "feature map payload has the wrong length");
  detail::ByteWriter w;
  w.put_raw("FMAP", 4);
  w.put(kFormatVersion);
  w.put(static_cast<std::uint64_t>(m.image_id));
  w.put(static_cast<std::uint32_t>(m.width));
  w.put(static_cast<std::uint32_t>(m.height));
  w.put(static_cast<std::uint32_t>(m.channels));
  w.put(kDtypeF32);
  for (float f : m.data) w.put_f32(f);
  return w.bytes();
}

inline DenseFeatureMap decode_fmap(const std::string& bytes, const fs::path& path = "<memory>") {
  detail::ByteReader r(bytes, path);
  r.require(4, "magic");
  if (r.get_raw(4) != "FMAP") fail(ErrorCode::BadMagic, path.string() + ": not an FMAP file");
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion)
    fail(ErrorCode::VersionUnsupported, path.string() + ": FMAP version " + std::to_string(version));
  const auto image_id = r.get<std::uint64_t>();
  const auto W = r.get<std::uint32_t>(), H = r.get<std::uint32_t>(), D = r.get<std::uint32_t>();
  const auto dtype = r.get<std::uint8_t>();
  if (dtype != kDtypeF32) fail(ErrorCode::VersionUnsupported, path.string() + ": unsupported dtype");
  if (W == 0 || H == 0 || D == 0) fail(ErrorCode::ParseError, path.string() + ": empty feature map");
  const std::uint64_t count = std::uint64_t{W} * H * D;
  r.require(count * 4, "payload");
  if (r.remaining() != count * 4) fail(ErrorCode::ParseError, path.string() + ": trailing bytes after payload");
  DenseFeatureMap m(static_cast<std::int64_t>(image_id), static_cast<int>(W), static_cast<int>(H),
                    static_cast<int>(D));
  for (auto& f : m.data) f = r.get_f32();
  return m;
}

inline void write_fmap(const DenseFeatureMap& m, const fs::path& path) { detail::write_file(path, encode_fmap(m)); }
inline DenseFeatureMap read_fmap(const fs::path& path) { return decode_fmap(detail::read_file(path), path); }

inline std::string encode_fpat(const FeaturePatchSet& set) {
  detail::ByteWriter w;
  w.put_raw("FPAT", 4);
  w.put(kFormatVersion);
  w.put(static_cast<std::uint64_t>(set.count()));
  for (const auto& [key, p] : set.patches()) {  // map order = sorted by key
    w.put(static_cast<std::uint64_t>(p.image_id));
    w.put(static_cast<std::uint64_t>(p.keypoint_id));
    w.put(static_cast<std::int32_t>(p.x0));
    w.put(static_cast<std::int32_t>(p.y0));
    w.put(static_cast<std::uint32_t>(p.size));
    w.put(static_cast<std::uint32_t>(p.channels));
    for (float f : p.data) w.put_f32(f);
  }
  return w.bytes();
}

inline FeaturePatchSet decode_fpat(const std::string& bytes, const fs::path& path = "<memory>") {
  detail::ByteReader r(bytes, path);
  r.require(4, "magic");
  if (r.get_raw(4) != "FPAT") fail(ErrorCode::BadMagic, path.string() + ": not an FPAT file");
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion)
    fail(ErrorCode::VersionUnsupported, path.string() + ": FPAT version " + std::to_string(version));
  const auto count = r.get<std::uint64_t>();
  FeaturePatchSet set;
  std::optional<NodeKey> last;
  for (std::uint64_t i = 0; i < count; ++i) {
    r.require(32, "patch header");
    FeaturePatch p;
    p.image_id = static_cast<std::int64_t>(r.get<std::uint64_t>());
    p.keypoint_id = static_cast<std::int64_t>(r.get<std::uint64_t>());
    p.x0 = r.get<std::int32_t>();
    p.y0 = r.get<std::int32_t>();
    const auto S = r.get<std::uint32_t>(), D = r.get<std::uint32_t>();
    if (S == 0 || D == 0) fail(ErrorCode::ParseError, path.string() + ": empty patch");
    if (last && !(*last < p.key()))
      fail(ErrorCode::ParseError, path.string() + ": patches not sorted by (image_id, keypoint_id) or duplicated");
    last = p.key();
    const std::uint64_t n = std::uint64_t{S} * S * D;
    r.require(n * 4, "patch payload");
    p.size = static_cast<int>(S);
    p.channels = static_cast<int>(D);
    p.data.resize(n);
    for (auto& f : p.data) f = r.get_f32();
    try {
      set.insert(std::move(p));
    } catch (const Error& e) {
      fail(ErrorCode::ParseError, path.string() + ": " + e.what());
    }
  }
  if (r.remaining() != 0) fail(ErrorCode::ParseError, path.string() + ": trailing bytes after last patch");
  return set;
}

inline void write_fpat(const FeaturePatchSet& set, const fs::path& path) { detail::write_file(path, encode_fpat(set)); }
inline FeaturePatchSet read_fpat(const fs::path& path) { return decode_fpat(detail::read_file(path), path); }

// ---------------------------------------------------------------------------
// Matches: IMG_A KP_A IMG_B KP_B CONFIDENCE per line

inline std::vector<Match> read_matches(const fs::path& path) {
  std::vector<Match> out;
  for (const auto& [n, line] : detail::numbered_lines(path)) {
    if (detail::skip_line(line)) continue;
    const auto t = detail::tokens(line);
    if (t.size() != 5) detail::parse_fail(path, n, "match line needs IMG_A KP_A IMG_B KP_B CONFIDENCE");
    Match m;
    m.a = NodeKey{detail::parse_number<std::int64_t>(t[0], path, n), detail::parse_number<std::int64_t>(t[1], path, n)};
    m.b = NodeKey{detail::parse_number<std::int64_t>(t[2], path, n), detail::parse_number<std::int64_t>(t[3], path, n)};
    m.confidence = detail::parse_number<double>(t[4], path, n);
    if (!(m.confidence > 0.0))
      fail(ErrorCode::NonPositiveConfidence, path.string() + ":" + std::to_string(n) + ": confidence must be > 0");
    out.push_back(m);
  }
  return out;
}

// Canonical, sorted, one line per unordered pair (highest confidence kept).
inline std::vector<Match> dedup_matches(const std::vector<Match>& matches) {
  std::map<std::pair<NodeKey, NodeKey>, double> best;
  for (const Match& m : matches) {
    if (!(m.confidence > 0.0)) fail(ErrorCode::NonPositiveConfidence, "confidence must be > 0");
    const Match c = canonical(m);
    auto [it, fresh] = best.emplace(std::pair{c.a, c.b}, c.confidence);
    if (!fresh) it->second = std::max(it->second, c.confidence);
  }
  std::vector<Match> out;
  out.reserve(best.size());
  for (const auto& [k, c] : best) out.push_back(Match{k.first, k.second, c});
  return out;
}

inline void write_matches(const std::vector<Match>& matches, const fs::path& path) {
  std::ostringstream s;
  s << "# IMG_A KP_A IMG_B KP_B CONFIDENCE\n";
  for (const Match& m : dedup_matches(matches))
    s << m.a.image_id << ' ' << m.a.keypoint_id << ' ' << m.b.image_id << ' ' << m.b.keypoint_id << ' '
      << detail::fmt12(m.confidence) << '\n';
  detail::write_file(path, s.str());
}

// ---------------------------------------------------------------------------
// 8-bit grayscale PGM (P5 binary, P2 ascii on read)

inline GrayImage read_pgm(const fs::path& path) {
  const std::string bytes = detail::read_file(path);
  std::size_t pos = 0;
  auto next_token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) fail(ErrorCode::ParseError, path.string() + ": truncated PGM header");
    return bytes.substr(start, pos - start);
  };
  const std::string magic = next_token();
  if (magic != "P5" && magic != "P2") fail(ErrorCode::BadMagic, path.string() + ": not a PGM file");
  const int w = detail::parse_number<int>(next_token(), path, 1);
  const int h = detail::parse_number<int>(next_token(), path, 1);
  const int maxval = detail::parse_number<int>(next_token(), path, 1);
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
    fail(ErrorCode::ParseError, path.string() + ": only 8-bit PGM images are supported");
  GrayImage img(w, h);
  const std::size_t n = static_cast<std::size_t>(w) * h;
  if (magic == "P5") {
    ++pos;  // single whitespace after maxval
    if (bytes.size() < pos + n) fail(ErrorCode::TruncatedPayload, path.string() + ": PGM payload too short");
    for (std::size_t i = 0; i < n; ++i)
      img.pixels[i] = static_cast<float>(static_cast<unsigned char>(bytes[pos + i])) / static_cast<float>(maxval);
  } else {
    for (std::size_t i = 0; i < n; ++i)
      img.pixels[i] = static_cast<float>(detail::parse_number<int>(next_token(), path, 1)) / static_cast<float>(maxval);
  }
  return img;
}

inline void write_pgm(const GrayImage& img, const fs::path& path) {
  std::string s = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  for (float v : img.pixels) s.push_back(static_cast<char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  detail::write_file(path, s);
}

// ---------------------------------------------------------------------------
// TOML-shaped config: `key = value` lines, optional [section] headers that
// prefix keys as "section.key", '#' comments, quoted strings.

using ConfigMap = std::map<std::string, std::string>;

inline ConfigMap parse_config(const std::string& text, const fs::path& path = "<config>") {
  ConfigMap out;
  std::string section;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++n;
    // Strip comments outside quotes.
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') detail::parse_fail(path, n, "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) detail::parse_fail(path, n, "empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) detail::parse_fail(path, n, "expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) detail::parse_fail(path, n, "expected key = value");
    if (value.front() == '"') {
      if (value.size() < 2 || value.back() != '"') detail::parse_fail(path, n, "unterminated string");
      value = value.substr(1, value.size() - 2);
    }
    if (!section.empty()) key = section + "." + key;
    if (!out.emplace(key, value).second) detail::parse_fail(path, n, "duplicate key " + key);
  }
  return out;
}

inline ConfigMap read_config(const fs::path& path) { return parse_config(detail::read_file(path), path); }

}  // namespace featref
