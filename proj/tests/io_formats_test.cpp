#include "featref/io_formats.hpp"

#include <gtest/gtest.h>

#include <unistd.h>

#include <cstring>
#include <random>

#include "featref/synth.hpp"
#include "test_util.hpp"

using namespace featref;

namespace {

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("featref_io_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

void put_text(const fs::path& p, const std::string& s) { detail::write_file(p, s); }

SynthScene tiny_scene() {
  SynthConfig c;
  c.n_cameras = 4;
  c.n_points = 30;
  c.width = 160;
  c.height = 120;
  c.focal = 130.0;
  c.keypoint_noise = 1.0;
  c.seed = 21;
  c.scene_extent = 2.0;
  c.camera_spread = 2.0;
  return synth_generate(c);
}

void write_minimal_model(const fs::path& dir, const std::string& cameras, const std::string& images,
                         const std::string& points) {
  fs::create_directories(dir);
  put_text(dir / "cameras.txt", cameras);
  put_text(dir / "images.txt", images);
  put_text(dir / "points3D.txt", points);
}

}  // namespace

TEST(Model, PinholeCameraLine) {
  TempDir tmp;
  write_minimal_model(tmp.path(), "# comment\n1 PINHOLE 640 480 500 500 320 240\n", "", "");
  const Reconstruction r = read_model(tmp.path());
  const Camera& c = r.camera(1);
  EXPECT_EQ(c.model, CameraModel::Pinhole);
  EXPECT_EQ(c.width, 640);
  EXPECT_EQ(c.height, 480);
  EXPECT_EQ(c.fx, 500.0);
  EXPECT_EQ(c.fy, 500.0);
  EXPECT_EQ(c.cx, 320.0);
  EXPECT_EQ(c.cy, 240.0);
}

TEST(Model, UntrackedKeypointAllowed) {
  TempDir tmp;
  write_minimal_model(tmp.path(), "1 SIMPLE_PINHOLE 100 100 80 50 50\n",
                      "1 1 0 0 0 0 0 5 1 a.pgm\n10 20 -1 30 40 7\n"
                      "2 1 0 0 0 1 0 5 1 b.pgm\n11 21 7\n",
                      "7 0 0 0 10 20 30 0.5 1 1 2 0\n");
  const Reconstruction r = read_model(tmp.path());
  ASSERT_EQ(r.image(1).keypoints.size(), 2u);
  EXPECT_EQ(r.keypoint({1, 0}).location, Vec2(10, 20));
  const auto k2p = r.keypoint_to_point();
  EXPECT_EQ(k2p.count({1, 0}), 0u);
  EXPECT_EQ(k2p.at({1, 1}), 7);
  EXPECT_EQ(r.point(7).color[2], 30);
  EXPECT_EQ(r.image(2).pose.translation, Vec3(1, 0, 5));
}

TEST(Model, QuaternionConvention) {
  TempDir tmp;
  // 90 degrees about +z: (w, x, y, z) = (cos 45, 0, 0, sin 45).
  const double h = std::sqrt(0.5);
  write_minimal_model(tmp.path(), "1 SIMPLE_PINHOLE 100 100 80 50 50\n",
                      "1 " + detail::fmt12(h) + " 0 0 " + detail::fmt12(h) + " 0 0 0 1 a.pgm\n\n", "");
  const Mat3 R = read_model(tmp.path()).image(1).pose.rotation;
  EXPECT_NEAR((R * Vec3::UnitX() - Vec3::UnitY()).norm(), 0.0, 1e-11);
  const Eigen::Quaterniond q = canonical_quaternion(R);
  EXPECT_GE(q.w(), 0.0);
  // A rotation by ~360 degrees has w < 0 before canonicalization.
  const Mat3 almost = Eigen::AngleAxisd(2 * M_PI - 0.1, Vec3::UnitX()).toRotationMatrix();
  EXPECT_GE(canonical_quaternion(almost).w(), 0.0);
}

TEST(Model, RoundTripIsByteIdentical) {
  const SynthScene s = tiny_scene();
  TempDir a, b;
  write_model(s.perturbed, a.path());
  const Reconstruction r = read_model(a.path());
  write_model(r, b.path());
  for (const char* f : {"cameras.txt", "images.txt", "points3D.txt"})
    EXPECT_EQ(detail::read_file(a / f), detail::read_file(b / f)) << f;
  // Values agree with the source to the printed precision.
  for (const auto& [id, p] : s.perturbed.points()) {
    EXPECT_NEAR((p.position - r.point(id).position).norm(), 0.0, 1e-10 * (1 + p.position.norm()));
    EXPECT_EQ(p.track, r.point(id).track);
  }
  for (const auto& [id, img] : s.perturbed.images()) {
    EXPECT_NEAR((img.pose.rotation - r.image(id).pose.rotation).norm(), 0.0, 1e-10);
    EXPECT_NEAR((img.pose.translation - r.image(id).pose.translation).norm(), 0.0, 1e-10);
    ASSERT_EQ(img.keypoints.size(), r.image(id).keypoints.size());
    for (std::size_t k = 0; k < img.keypoints.size(); ++k)
      EXPECT_NEAR((img.keypoints[k].location - r.image(id).keypoints[k].location).norm(), 0.0, 1e-9);
  }
}

TEST(Model, Errors) {
  TempDir tmp;
  write_minimal_model(tmp.path(), "1 OPENCV 100 100 80 80 50 50 0 0 0 0\n", "", "");
  EXPECT_FEATREF_ERROR(read_model(tmp.path()), ErrorCode::UnknownCameraModel);

  write_minimal_model(tmp.path(), "1 SIMPLE_PINHOLE 100 100 80 50 50\n", "1 1 0 0 0 0 0 5 2 a.pgm\n\n", "");
  EXPECT_FEATREF_ERROR(read_model(tmp.path()), ErrorCode::DanglingReference);

  write_minimal_model(tmp.path(), "1 SIMPLE_PINHOLE 100 100 80 50 50\n", "1 1 0 0 0 0 0 5 1 a.pgm\n1 2 9\n", "");
  EXPECT_FEATREF_ERROR(read_model(tmp.path()), ErrorCode::DanglingReference);

  write_minimal_model(tmp.path(), "1 SIMPLE_PINHOLE 100 100 80 50 50\n", "1 1 0 0 0 0 0 5 1 a.pgm\n1 2 -1\n",
                      "4 0 0 0 1 1 1 0 3 0\n");
  EXPECT_FEATREF_ERROR(read_model(tmp.path()), ErrorCode::DanglingReference);

  write_minimal_model(tmp.path(), "1 SIMPLE_PINHOLE 100 100 80 50 50\n", "1 1 0 0 0 0 zero 5 1 a.pgm\n\n", "");
  try {
    read_model(tmp.path());
    FAIL() << "expected ParseError";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ParseError);
    EXPECT_NE(std::string(e.what()).find("images.txt:1"), std::string::npos) << e.what();
  }
}

namespace {

DenseFeatureMap random_fmap(std::uint64_t seed, int w = 7, int h = 5, int d = 3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  DenseFeatureMap m(42, w, h, d);
  for (auto& f : m.data) f = n(rng);
  return m;
}

std::string with_u32_at(std::string bytes, std::size_t offset, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) bytes[offset + static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xff);
  return bytes;
}

}  // namespace

TEST(Fmap, HeaderLayout) {
  const DenseFeatureMap m = random_fmap(1, 3, 2, 2);
  const std::string b = encode_fmap(m);
  ASSERT_EQ(b.size(), 29u + 3 * 2 * 2 * 4);
  EXPECT_EQ(b.substr(0, 4), "FMAP");
  auto u32 = [&](std::size_t o) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[o + static_cast<std::size_t>(i)]);
    return v;
  };
  EXPECT_EQ(u32(4), 1u);
  EXPECT_EQ(u32(8), 42u);  // image id low word
  EXPECT_EQ(u32(12), 0u);
  EXPECT_EQ(u32(16), 3u);
  EXPECT_EQ(u32(20), 2u);
  EXPECT_EQ(u32(24), 2u);
  EXPECT_EQ(b[28], 0);
  float first;
  const std::uint32_t bits = u32(29);
  std::memcpy(&first, &bits, 4);
  EXPECT_EQ(first, m.data[0]);
}

TEST(Fmap, RoundTripAndErrors) {
  TempDir tmp;
  const DenseFeatureMap m = random_fmap(2);
  write_fmap(m, tmp / "a.fmap");
  const DenseFeatureMap r = read_fmap(tmp / "a.fmap");
  EXPECT_EQ(r.image_id, 42);
  EXPECT_EQ(r.data, m.data);
  write_fmap(r, tmp / "b.fmap");
  EXPECT_EQ(detail::read_file(tmp / "a.fmap"), detail::read_file(tmp / "b.fmap"));

  std::string bytes = encode_fmap(m);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_FEATREF_ERROR(decode_fmap(bad), ErrorCode::BadMagic);
  EXPECT_FEATREF_ERROR(decode_fmap(bytes.substr(0, bytes.size() - 4)), ErrorCode::TruncatedPayload);
  EXPECT_FEATREF_ERROR(decode_fmap(bytes.substr(0, 10)), ErrorCode::TruncatedPayload);
  EXPECT_FEATREF_ERROR(decode_fmap(with_u32_at(bytes, 4, 2)), ErrorCode::VersionUnsupported);
  bad = bytes;
  bad[28] = 1;
  EXPECT_FEATREF_ERROR(decode_fmap(bad), ErrorCode::VersionUnsupported);
  EXPECT_FEATREF_ERROR(decode_fmap(bytes + "x"), ErrorCode::ParseError);
  EXPECT_FEATREF_ERROR(read_fmap(tmp / "missing.fmap"), ErrorCode::IoError);
}

TEST(Fpat, RoundTripAndErrors) {
  const SynthScene s = tiny_scene();
  const FeaturePatchSet set = render_patches(s.field, s.perturbed, 8);
  TempDir tmp;
  write_fpat(set, tmp / "a.fpat");
  const FeaturePatchSet r = read_fpat(tmp / "a.fpat");
  ASSERT_EQ(r.count(), set.count());
  for (const auto& [k, p] : set.patches()) {
    const FeaturePatch& q = r.at(k);
    EXPECT_EQ(q.x0, p.x0);
    EXPECT_EQ(q.y0, p.y0);
    EXPECT_EQ(q.data, p.data);
  }
  write_fpat(r, tmp / "b.fpat");
  EXPECT_EQ(detail::read_file(tmp / "a.fpat"), detail::read_file(tmp / "b.fpat"));

  const std::string bytes = encode_fpat(set);
  EXPECT_EQ(bytes.size(), 16 + set.count() * (32 + 8 * 8 * 8 * 4));
  std::string bad = bytes;
  bad[3] = 'X';
  EXPECT_FEATREF_ERROR(decode_fpat(bad), ErrorCode::BadMagic);
  EXPECT_FEATREF_ERROR(decode_fpat(bytes.substr(0, bytes.size() - 4)), ErrorCode::TruncatedPayload);
  EXPECT_FEATREF_ERROR(decode_fpat(with_u32_at(bytes, 4, 7)), ErrorCode::VersionUnsupported);
  // Count claims one more entry than present.
  EXPECT_FEATREF_ERROR(decode_fpat(with_u32_at(bytes, 8, static_cast<std::uint32_t>(set.count() + 1))),
                       ErrorCode::TruncatedPayload);

  // Swapping the first two entries breaks the ordering.
  const std::size_t entry = 32 + 8 * 8 * 8 * 4;
  bad = bytes.substr(0, 16) + bytes.substr(16 + entry, entry) + bytes.substr(16, entry) + bytes.substr(16 + 2 * entry);
  EXPECT_FEATREF_ERROR(decode_fpat(bad), ErrorCode::ParseError);
}

TEST(Matches, ParseWriteDedup) {
  TempDir tmp;
  put_text(tmp / "m.txt", "# header\n1 5 2 9 0.87\n\n3 1 1 2 0.5\n");
  const auto m = read_matches(tmp / "m.txt");
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m[0].a, (NodeKey{1, 5}));
  EXPECT_EQ(m[0].b, (NodeKey{2, 9}));
  EXPECT_EQ(m[0].confidence, 0.87);

  put_text(tmp / "zero.txt", "1 5 2 9 0\n");
  EXPECT_FEATREF_ERROR(read_matches(tmp / "zero.txt"), ErrorCode::NonPositiveConfidence);
  put_text(tmp / "bad.txt", "1 5 2 9\n");
  EXPECT_FEATREF_ERROR(read_matches(tmp / "bad.txt"), ErrorCode::ParseError);

  std::vector<Match> dup{{{2, 9}, {1, 5}, 0.4}, {{1, 5}, {2, 9}, 0.9}, {{3, 1}, {1, 2}, 0.5}};
  write_matches(dup, tmp / "out.txt");
  const auto back = read_matches(tmp / "out.txt");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].a, (NodeKey{1, 2}));
  EXPECT_EQ(back[1].a, (NodeKey{1, 5}));
  EXPECT_EQ(back[1].confidence, 0.9);
}

TEST(Matches, RoundTripPreservesSet) {
  const SynthScene s = tiny_scene();
  TempDir tmp;
  write_matches(s.matches, tmp / "m.txt");
  const auto back = read_matches(tmp / "m.txt");
  const auto expected = dedup_matches(s.matches);
  ASSERT_EQ(back.size(), expected.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].a, expected[i].a);
    EXPECT_EQ(back[i].b, expected[i].b);
    EXPECT_NEAR(back[i].confidence, expected[i].confidence, 1e-12);
  }
}

TEST(Pgm, RoundTrip) {
  TempDir tmp;
  GrayImage img(5, 3);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<float>(i * 17 % 256) / 255.0f;
  write_pgm(img, tmp / "a.pgm");
  const GrayImage r = read_pgm(tmp / "a.pgm");
  ASSERT_EQ(r.width, 5);
  ASSERT_EQ(r.height, 3);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_FLOAT_EQ(r.pixels[i], img.pixels[i]);
  put_text(tmp / "ascii.pgm", "P2\n# c\n2 1\n10\n0 10\n");
  const GrayImage a = read_pgm(tmp / "ascii.pgm");
  EXPECT_FLOAT_EQ(a.at(1, 0), 1.0f);
  put_text(tmp / "short.pgm", "P5\n4 4\n255\nabc");
  EXPECT_FEATREF_ERROR(read_pgm(tmp / "short.pgm"), ErrorCode::TruncatedPayload);
  put_text(tmp / "ppm.pgm", "P6\n1 1\n255\nabc");
  EXPECT_FEATREF_ERROR(read_pgm(tmp / "ppm.pgm"), ErrorCode::BadMagic);
}

TEST(Config, Parse) {
  const ConfigMap c = parse_config("# top\nseed = 7\nfield = \"perlin_like\"  # trailing\n[noise]\nkeypoint = 2.5\n");
  EXPECT_EQ(c.at("seed"), "7");
  EXPECT_EQ(c.at("field"), "perlin_like");
  EXPECT_EQ(c.at("noise.keypoint"), "2.5");
  EXPECT_FEATREF_ERROR(parse_config("a = 1\na = 2\n"), ErrorCode::ParseError);
  EXPECT_FEATREF_ERROR(parse_config("just words\n"), ErrorCode::ParseError);
  EXPECT_FEATREF_ERROR(parse_config("[open\n"), ErrorCode::ParseError);
  EXPECT_FEATREF_ERROR(parse_config("s = \"x\n"), ErrorCode::ParseError);
}
