// featref command-line front end. Exit codes: 0 ok, 1 usage, 2 data, 3 numerical.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "featref/bundle_adjust.hpp"
#include "featref/evaluate.hpp"
#include "featref/feature_store.hpp"
#include "featref/io_formats.hpp"
#include "featref/keypoint_adjust.hpp"
#include "featref/match_graph.hpp"
#include "featref/pipeline.hpp"
#include "featref/synth.hpp"

namespace fs = std::filesystem;
using namespace featref;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::NumericalFailure:
    case ErrorCode::SingularPointBlock:
    case ErrorCode::DegenerateGeometry:
    case ErrorCode::CheiralityViolation:
    case ErrorCode::GaugeUnderconstrained:
    case ErrorCode::TooFewInliers:
      return kExitNumerical;
    default:
      return kExitData;
  }
}

// Keys may be given bare or under a [synth] section.
SynthConfig synth_config(const ConfigMap& cfg) {
  SynthConfig c;
  for (const auto& [raw, value] : cfg) {
    const std::string key = raw.rfind("synth.", 0) == 0 ? raw.substr(6) : raw;
    auto num = [&]() {
      try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
      } catch (const std::exception&) {
        fail(ErrorCode::ConfigInvalid, "config key '" + raw + "' is not a number: " + value);
      }
    };
    auto integer = [&]() {
      const double v = num();
      if (v != std::floor(v)) fail(ErrorCode::ConfigInvalid, "config key '" + raw + "' must be an integer");
      return static_cast<int>(v);
    };
    if (key == "n_cameras") c.n_cameras = integer();
    else if (key == "n_points") c.n_points = integer();
    else if (key == "width") c.width = integer();
    else if (key == "height") c.height = integer();
    else if (key == "focal") c.focal = num();
    else if (key == "keypoint_noise") c.keypoint_noise = num();
    else if (key == "outlier_rate") c.outlier_rate = num();
    else if (key == "field") c.field = parse_field_kind(value);
    else if (key == "feature_dim") c.feature_dim = integer();
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(integer());
    else if (key == "scene_extent") c.scene_extent = num();
    else if (key == "camera_distance") c.camera_distance = num();
    else if (key == "camera_spread") c.camera_spread = num();
    else if (key == "blob_spacing_px") c.blob_spacing_px = num();
    else if (key == "pose_noise_deg") c.pose_noise_deg = num();
    else if (key == "pose_noise_trans") c.pose_noise_trans = num();
    else if (key == "patch_size") c.patch_size = integer();
    else if (key == "image_margin") c.image_margin = integer();
    else fail(ErrorCode::ConfigInvalid, "unknown config key '" + raw + "'");
  }
  c.validate();
  return c;
}

void cmd_synth(const std::string& config, const fs::path& out, bool write_fmaps, int threads) {
  const SynthConfig c = synth_config(read_config(config));
  const SynthScene s = synth_generate(c);
  write_model(s.truth, out / "gt");
  write_model(s.perturbed, out / "model");
  write_matches(s.matches, out / "matches.txt");
  write_fpat(render_patches(s.field, s.perturbed, c.patch_size, threads), out / "patches.fpat");
  fs::create_directories(out / "images");
  if (write_fmaps) fs::create_directories(out / "fmaps");
  for (const auto& [id, img] : s.truth.images()) {
    const Camera& cam = s.truth.camera(img.camera_id);
    write_pgm(render_image(s.field, img.pose, cam), out / "images" / (std::to_string(id) + ".pgm"));
    if (write_fmaps)
      write_fmap(render_feature_map(s.field, img.pose, cam, id, threads), out / "fmaps" / (std::to_string(id) + ".fmap"));
  }
  std::cout << "synth: " << s.truth.images().size() << " images, " << s.truth.points().size() << " points, "
            << s.num_true_matches << " true + " << s.num_outlier_matches << " outlier matches\n";
}

void cmd_extract(const std::string& method, const fs::path& images, const fs::path& out, int ncc_window) {
  fs::create_directories(out);
  std::size_t n = 0;
  for (const auto& entry : fs::directory_iterator(images)) {
    if (entry.path().extension() != ".pgm") continue;
    std::int64_t id = 0;
    try {
      id = std::stoll(entry.path().stem().string());
    } catch (const std::exception&) {
      fail(ErrorCode::ParseError, entry.path().string() + ": image file names must be numeric image ids");
    }
    const GrayImage img = read_pgm(entry.path());
    const DenseFeatureMap m =
        method == "gradient" ? extract_gradient_features(img, id) : extract_ncc_intensity(img, ncc_window, id);
    write_fmap(m, out / (std::to_string(id) + ".fmap"));
    ++n;
  }
  if (n == 0) fail(ErrorCode::EmptyInput, "no .pgm images in " + images.string());
  std::cout << "extract: " << n << " feature maps (" << method << ")\n";
}

void cmd_patches(const fs::path& model, const fs::path& fmaps, int size, const fs::path& out) {
  const Reconstruction r = read_model(model);
  FeaturePatchSet set;
  for (const auto& [id, img] : r.images()) {
    const DenseFeatureMap m = read_fmap(fmaps / (std::to_string(id) + ".fmap"));
    if (m.image_id != id) fail(ErrorCode::IdMismatch, "feature map id differs from image " + std::to_string(id));
    for (FeaturePatch& p : extract_patches(m, img.keypoints, size)) set.insert(std::move(p));
  }
  write_fpat(set, out);
  std::cout << "patches: " << set.count() << " of size " << size << "\n";
}

void cmd_ka(const fs::path& model, const fs::path& matches, const fs::path& patches, const fs::path& out,
            double max_drift, double loss_scale, bool retri, int threads) {
  Reconstruction r = read_model(model);
  const std::vector<TentativeTrack> tracks = build_tracks(read_matches(matches));
  const FeaturePatchSet set = read_fpat(patches);
  KeypointLocations kps;
  for (const auto& [id, img] : r.images())
    for (const auto& k : img.keypoints) kps[k.key()] = k.location;
  KAOptions o;
  o.max_drift = max_drift;
  o.loss = RobustLoss::cauchy(loss_scale);
  o.num_threads = threads;
  const KAResult res = adjust_all(tracks, kps, set, o);
  apply_locations(r, res.locations);
  std::size_t failed = 0;
  for (const auto& rep : res.reports)
    if (!rep.ok) ++failed;
  std::cout << "ka: " << tracks.size() << " tracks, " << res.locations.size() << " keypoints moved, " << failed
            << " tracks failed\n";
  if (retri) {
    const TriangulationReport t = triangulate_tracks(r, tracks);
    std::cout << "triangulation: " << t.points << " points, " << t.rejected_observations << " rejected observations, "
              << t.failed_tracks << " failed\n";
  }
  write_model(r, out);
}

BAOptions ba_options(const std::string& poses, int max_iters, int threads) {
  BAOptions o;
  o.poses = poses == "free" ? PoseHandling::AllFree : PoseHandling::AllFixed;
  o.lm.max_iterations = max_iters;
  o.num_threads = threads;
  return o;
}

void print_ba(const char* name, const BAReport& rep) {
  std::cout << name << ": " << rep.num_observations << " observations, cost " << rep.summary.initial_cost() << " -> "
            << rep.summary.final_cost() << ", " << rep.summary.iterations << " iterations ("
            << to_string(rep.summary.termination) << "), " << rep.dropped.size() << " dropped\n";
}

void cmd_ba(const fs::path& model, const fs::path& patches, const std::string& mode, const std::string& poses,
            int max_iters, const fs::path& out, int threads) {
  Reconstruction r = read_model(model);
  const FeaturePatchSet set = read_fpat(patches);
  BAOptions o = ba_options(poses, max_iters, threads);
  o.mode = mode == "costmap" ? BAMode::CostMap : BAMode::Exact;
  const TrackReferences refs = select_references(r, set, o.loss, threads);
  print_ba("ba", featuremetric_ba(r, set, refs, o));
  write_model(r, out);
}

void cmd_geo_ba(const fs::path& model, const std::string& poses, int max_iters, const fs::path& out, int threads) {
  Reconstruction r = read_model(model);
  print_ba("geo-ba", geometric_ba(r, ba_options(poses, max_iters, threads)));
  write_model(r, out);
}

nlohmann::json summary_json(const ErrorSummary& s) {
  return {{"count", s.count}, {"mean", s.mean}, {"median", s.median}, {"max", s.max}};
}

nlohmann::json ratios_json(const std::vector<Ratio>& rs) {
  nlohmann::json a = nlohmann::json::array();
  for (const Ratio& r : rs) a.push_back({{"threshold", r.threshold}, {"value", r.value}});
  return a;
}

void cmd_eval(const fs::path& refined, const fs::path& truth, const fs::path& report, bool plane) {
  const Reconstruction est = read_model(refined);
  const Reconstruction gt = read_model(truth);
  SurfaceProjector surface;
  if (plane) surface = [](const Vec3& p) { return Vec3(p.x(), p.y(), 0.0); };
  const EvalReport rep = evaluate(est, gt, {}, {}, surface);
  nlohmann::json j = {
      {"keypoint_error_px", summary_json(rep.keypoint_error)},
      {"keypoint_auc", ratios_json(rep.keypoint_auc)},
      {"scene_diameter", rep.diameter},
      {"accuracy", ratios_json(rep.accuracy)},
      {"completeness", ratios_json(rep.completeness)},
      {"rotation_error_deg", summary_json(rep.rotation_error_deg)},
      {"translation_error", summary_json(rep.translation_error)},
      {"pose_auc", ratios_json(rep.pose_auc)},
  };
  if (rep.surface_error) j["surface_error_px"] = summary_json(*rep.surface_error);
  if (!report.empty()) {
    if (report.has_parent_path()) fs::create_directories(report.parent_path());
    std::ofstream f(report);
    if (!f) fail(ErrorCode::IoError, "cannot write " + report.string());
    f << j.dump(2) << "\n";
  }
  std::cout << "eval: keypoint error mean " << rep.keypoint_error.mean << " px, median " << rep.keypoint_error.median
            << " px";
  if (rep.surface_error) std::cout << ", surface error mean " << rep.surface_error->mean << " px";
  std::cout << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Featuremetric keypoint and bundle adjustment"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);

  std::string config, method = "gradient", mode = "exact", poses = "fixed";
  fs::path out, images, model, fmaps, matches, patches, refined, truth, report;
  int size = kDefaultPatchSize, ncc_window = 5, max_iters = default_ba_lm_options().max_iterations;
  double max_drift = kDefaultMaxDrift, loss_scale = kDefaultCauchyScale;
  bool retri = false, no_fmaps = false, plane = false;

  auto* synth = app.add_subcommand("synth", "generate a synthetic scene");
  synth->add_option("--config", config)->required()->check(CLI::ExistingFile);
  synth->add_option("--out", out)->required();
  synth->add_flag("--no-fmaps", no_fmaps, "skip rendering dense feature maps");

  auto* extract = app.add_subcommand("extract", "dense features from PGM images");
  extract->add_option("--method", method)->check(CLI::IsMember({"gradient", "ncc"}));
  extract->add_option("--images", images)->required()->check(CLI::ExistingDirectory);
  extract->add_option("--out", out)->required();
  extract->add_option("--ncc-window", ncc_window);

  auto* patch = app.add_subcommand("patches", "cut feature patches around keypoints");
  patch->add_option("--model", model)->required()->check(CLI::ExistingDirectory);
  patch->add_option("--fmaps", fmaps)->required()->check(CLI::ExistingDirectory);
  patch->add_option("--size", size);
  patch->add_option("--out", out)->required();

  auto* ka = app.add_subcommand("ka", "featuremetric keypoint adjustment");
  ka->add_option("--model", model)->required()->check(CLI::ExistingDirectory);
  ka->add_option("--matches", matches)->required()->check(CLI::ExistingFile);
  ka->add_option("--patches", patches)->required()->check(CLI::ExistingFile);
  ka->add_option("--out", out)->required();
  ka->add_option("--max-drift", max_drift);
  ka->add_option("--loss-scale", loss_scale);
  ka->add_flag("--retriangulate", retri, "rebuild points from the adjusted tracks");

  auto* ba = app.add_subcommand("ba", "featuremetric bundle adjustment");
  ba->add_option("--model", model)->required()->check(CLI::ExistingDirectory);
  ba->add_option("--patches", patches)->required()->check(CLI::ExistingFile);
  ba->add_option("--mode", mode)->check(CLI::IsMember({"exact", "costmap"}));
  ba->add_option("--poses", poses)->check(CLI::IsMember({"fixed", "free"}));
  ba->add_option("--max-iters", max_iters)->check(CLI::PositiveNumber);
  ba->add_option("--out", out)->required();

  auto* geo = app.add_subcommand("geo-ba", "reprojection-error bundle adjustment");
  geo->add_option("--model", model)->required()->check(CLI::ExistingDirectory);
  geo->add_option("--poses", poses)->check(CLI::IsMember({"fixed", "free"}));
  geo->add_option("--max-iters", max_iters)->check(CLI::PositiveNumber);
  geo->add_option("--out", out)->required();

  auto* eval = app.add_subcommand("eval", "compare a model against ground truth");
  eval->add_option("--refined", refined)->required()->check(CLI::ExistingDirectory);
  eval->add_option("--truth", truth)->required()->check(CLI::ExistingDirectory);
  eval->add_option("--report", report);
  eval->add_flag("--plane", plane, "also score points against the plane Z = 0");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*synth) cmd_synth(config, out, !no_fmaps, threads);
    else if (*extract) cmd_extract(method, images, out, ncc_window);
    else if (*patch) cmd_patches(model, fmaps, size, out);
    else if (*ka) cmd_ka(model, matches, patches, out, max_drift, loss_scale, retri, threads);
    else if (*ba) cmd_ba(model, patches, mode, poses, max_iters, out, threads);
    else if (*geo) cmd_geo_ba(model, poses, max_iters, out, threads);
    else if (*eval) cmd_eval(refined, truth, report, plane);
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return 0;
}
