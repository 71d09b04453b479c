// SPDX-License-Identifier: Apache-2.0
//
// Scenes and annotations, KITTI raw-file parsing, the native scene format,
// synthetic scene generation and the sparse / noisy annotation splits.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ss3d/binio.hpp"
#include "ss3d/core.hpp"
#include "ss3d/geometry.hpp"

namespace ss3d {

struct Provenance {
  enum class Kind : std::uint8_t { Human = 0, Pseudo = 1 };
  Kind kind = Kind::Human;
  std::uint16_t round = 0;

  static Provenance human() { return {}; }
  static Provenance pseudo(int round) {
    if (round < 2) throw Error(ErrorCode::ConfigInvalid, "pseudo labels start at round 2");
    return {Kind::Pseudo, static_cast<std::uint16_t>(round)};
  }
  bool is_human() const { return kind == Kind::Human; }
  bool is_pseudo() const { return kind == Kind::Pseudo; }
  bool operator==(const Provenance&) const = default;
};

/// KITTI label metadata used for difficulty bucketing.
struct AnnotationMeta {
  double truncation = 0.0;
  int occlusion = 0;
  double bbox2d_height = 0.0;
  bool operator==(const AnnotationMeta&) const = default;
};

struct Annotation {
  Box3D box;
  ClassId class_id = ClassId::Car;
  Provenance provenance;
  std::optional<AnnotationMeta> meta;
  bool operator==(const Annotation&) const = default;
};

/// A ground-truth object hidden from the learning pipeline. `uid` is stable
/// across copies of the object (e.g. when pasted into another scene).
struct LatentObject {
  Annotation annotation;
  std::uint64_t uid = 0;
  bool operator==(const LatentObject&) const = default;
};

/// Capability token gating access to latent truth. Only the oracle detector,
/// the evaluator and data tooling mint one.
class LatentAccess {
 public:
  static LatentAccess oracle() { return LatentAccess(); }
  static LatentAccess evaluator() { return LatentAccess(); }
  static LatentAccess data_tools() { return LatentAccess(); }

 private:
  LatentAccess() = default;
};

class Scene {
 public:
  std::string id;
  PointSet points;
  std::vector<Annotation> annotations;

  bool has_latent() const { return latent_.has_value(); }

  const std::vector<LatentObject>& latent_gt(const LatentAccess&) const {
    if (!latent_) throw Error(ErrorCode::CapabilityDenied, "scene " + id + " carries no latent truth");
    return *latent_;
  }
  void set_latent(std::vector<LatentObject> objects, const LatentAccess&) { latent_ = std::move(objects); }
  void clear_latent() { latent_.reset(); }

  bool operator==(const Scene&) const = default;

 private:
  std::optional<std::vector<LatentObject>> latent_;
};

// ---------------------------------------------------------------------------
// KITTI raw formats

inline PointSet parse_velodyne(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % 16 != 0) {
    throw Error(ErrorCode::MalformedBinary,
                "velodyne payload of " + std::to_string(bytes.size()) + " bytes is not a multiple of 16");
  }
  PointSet pts(bytes.size() / 16);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    float v[4];
    std::memcpy(v, bytes.data() + 16 * i, 16);
    pts[i] = {v[0], v[1], v[2], v[3]};
  }
  return pts;
}

inline Bytes serialize_velodyne(const PointSet& pts) {
  ByteWriter w;
  for (const Point& p : pts) {
    w.put(static_cast<float>(p.x));
    w.put(static_cast<float>(p.y));
    w.put(static_cast<float>(p.z));
    w.put(static_cast<float>(p.intensity));
  }
  return w.take();
}

struct CalibMatrices {
  Eigen::Matrix<double, 3, 4> tr_velo_to_cam = Eigen::Matrix<double, 3, 4>::Identity();
  Eigen::Matrix3d r0_rect = Eigen::Matrix3d::Identity();

  /// LiDAR -> rectified camera as a homogeneous 4x4 transform.
  Eigen::Matrix4d velo_to_rect() const {
    Eigen::Matrix4d tr = Eigen::Matrix4d::Identity();
    tr.topRows<3>() = tr_velo_to_cam;
    Eigen::Matrix4d r0 = Eigen::Matrix4d::Identity();
    r0.topLeftCorner<3, 3>() = r0_rect;
    return r0 * tr;
  }
};

namespace detail {

inline std::vector<std::string> split_ws(std::string_view line) {
  std::vector<std::string> out;
  std::istringstream in{std::string(line)};
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

inline std::optional<double> parse_double(std::string_view s) {
  double v = 0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    start = end + 1;
  }
  return lines;
}

}  // namespace detail

inline CalibMatrices parse_calib(std::string_view text) {
  CalibMatrices calib;
  bool have_r0 = false, have_tr = false;
  const auto lines = detail::split_lines(text);
  for (std::size_t n = 0; n < lines.size(); ++n) {
    const std::string_view line = lines[n];
    const auto colon = line.find(':');
    if (colon == std::string_view::npos) {
      if (detail::split_ws(line).empty()) continue;
      throw Error(ErrorCode::MalformedCalib, "line " + std::to_string(n + 1) + ": missing ':'");
    }
    const auto key_tokens = detail::split_ws(line.substr(0, colon));
    if (key_tokens.size() != 1) {
      throw Error(ErrorCode::MalformedCalib, "line " + std::to_string(n + 1) + ": bad key");
    }
    const std::string& key = key_tokens[0];
    const bool is_r0 = key == "R0_rect" || key == "R_rect";
    const bool is_tr = key == "Tr_velo_to_cam" || key == "Tr_velo_cam";
    if (!is_r0 && !is_tr) continue;
    std::vector<double> vals;
    for (const auto& tok : detail::split_ws(line.substr(colon + 1))) {
      auto v = detail::parse_double(tok);
      if (!v) throw Error(ErrorCode::MalformedCalib, "line " + std::to_string(n + 1) + ": bad number '" + tok + "'");
      vals.push_back(*v);
    }
    if (is_r0) {
      if (vals.size() != 9) throw Error(ErrorCode::MalformedCalib, "line " + std::to_string(n + 1) + ": R0_rect needs 9 values");
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) calib.r0_rect(r, c) = vals[3 * r + c];
      const double dev = (calib.r0_rect * calib.r0_rect.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
      if (dev > 1e-3) throw Error(ErrorCode::MalformedCalib, "line " + std::to_string(n + 1) + ": R0_rect is not orthonormal");
      have_r0 = true;
    } else {
      if (vals.size() != 12) throw Error(ErrorCode::MalformedCalib, "line " + std::to_string(n + 1) + ": Tr_velo_to_cam needs 12 values");
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) calib.tr_velo_to_cam(r, c) = vals[4 * r + c];
      have_tr = true;
    }
  }
  if (!have_r0) throw Error(ErrorCode::MalformedCalib, "line 0: missing R0_rect");
  if (!have_tr) throw Error(ErrorCode::MalformedCalib, "line 0: missing Tr_velo_to_cam");
  return calib;
}

/// Parses KITTI object labels into LiDAR-frame annotations. DontCare lines and
/// types outside the class set are dropped.
inline std::vector<Annotation> parse_kitti_labels(std::string_view text, const CalibMatrices& calib) {
  std::vector<Annotation> out;
  const Eigen::Matrix4d rect_to_velo = calib.velo_to_rect().inverse();
  const auto lines = detail::split_lines(text);
  for (std::size_t n = 0; n < lines.size(); ++n) {
    const auto tok = detail::split_ws(lines[n]);
    if (tok.empty()) continue;
    const std::string where = "line " + std::to_string(n + 1);
    if (tok.size() < 15 || tok.size() > 16) throw Error(ErrorCode::MalformedLabel, where + ": expected 15 or 16 fields");
    double f[14];
    for (int i = 0; i < 14; ++i) {
      auto v = detail::parse_double(tok[i + 1]);
      if (!v) throw Error(ErrorCode::MalformedLabel, where + ": bad number '" + tok[i + 1] + "'");
      f[i] = *v;
    }
    if (tok[0] == "DontCare") continue;
    auto cls = parse_class(tok[0]);
    if (!cls) continue;
    const double h = f[7], w = f[8], l = f[9];
    if (!(h > 0 && w > 0 && l > 0)) throw Error(ErrorCode::MalformedLabel, where + ": non-positive dimensions");
    const Eigen::Vector4d cam(f[10], f[11], f[12], 1.0);
    const Eigen::Vector4d velo = rect_to_velo * cam;
    Annotation a;
    a.class_id = *cls;
    a.box = {velo.x(), velo.y(), velo.z() + 0.5 * h, l, w, h, normalize_angle(-f[13] - 0.5 * kPi)};
    a.meta = AnnotationMeta{f[0], static_cast<int>(f[1]), f[6] - f[4]};
    out.push_back(a);
  }
  return out;
}

/// Inverse of parse_kitti_labels for the fields it reads (alpha and the 2D box
/// left/right edges are not recoverable and are written as 0 / from meta).
inline std::string format_kitti_labels(const std::vector<Annotation>& anns, const CalibMatrices& calib) {
  const Eigen::Matrix4d velo_to_rect = calib.velo_to_rect();
  std::string out;
  char buf[512];
  for (const Annotation& a : anns) {
    const Eigen::Vector4d bottom(a.box.x, a.box.y, a.box.z - 0.5 * a.box.h, 1.0);
    const Eigen::Vector4d cam = velo_to_rect * bottom;
    const AnnotationMeta meta = a.meta.value_or(AnnotationMeta{});
    std::snprintf(buf, sizeof(buf), "%s %.17g %d 0 0 0 0 %.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g\n",
                  std::string(class_name(a.class_id)).c_str(), meta.truncation, meta.occlusion,
                  meta.bbox2d_height, a.box.h, a.box.w, a.box.l, cam.x(), cam.y(), cam.z(),
                  normalize_angle(-a.box.yaw - 0.5 * kPi));
    out += buf;
  }
  return out;
}

/// Keeps points and boxes within the approximate front-camera field of view.
inline bool in_camera_fov(double x, double y, double half_angle = kPi / 4.0) {
  return x > 0.0 && std::abs(std::atan2(y, x)) <= half_angle;
}

inline Scene load_kitti_scene(std::string id, std::string_view label_text, std::string_view calib_text,
                              std::span<const std::uint8_t> velodyne_bytes, bool fov_filter = false) {
  Scene scene;
  scene.id = std::move(id);
  const CalibMatrices calib = parse_calib(calib_text);
  scene.points = parse_velodyne(velodyne_bytes);
  scene.annotations = parse_kitti_labels(label_text, calib);
  if (fov_filter) {
    std::erase_if(scene.points, [](const Point& p) { return !in_camera_fov(p.x, p.y); });
    std::erase_if(scene.annotations, [](const Annotation& a) { return !in_camera_fov(a.box.x, a.box.y); });
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Native scene format

inline constexpr std::uint16_t kSceneFormatVersion = 1;

namespace detail {

inline void write_annotation(ByteWriter& w, const Annotation& a) {
  for (double v : {a.box.x, a.box.y, a.box.z, a.box.l, a.box.w, a.box.h, a.box.yaw}) w.put(v);
  w.put(static_cast<std::uint8_t>(a.class_id));
  w.put(static_cast<std::uint8_t>(a.provenance.kind));
  w.put(a.provenance.round);
  w.put(static_cast<std::uint8_t>(a.meta ? 1 : 0));
  if (a.meta) {
    w.put(a.meta->truncation);
    w.put(static_cast<std::int32_t>(a.meta->occlusion));
    w.put(a.meta->bbox2d_height);
  }
}

inline ClassId checked_class(std::uint8_t raw, ErrorCode code) {
  if (raw >= kNumClasses) throw Error(code, "unknown class tag " + std::to_string(raw));
  return static_cast<ClassId>(raw);
}

inline Annotation read_annotation(ByteReader& r, ErrorCode code) {
  Annotation a;
  a.box.x = r.get<double>();
  a.box.y = r.get<double>();
  a.box.z = r.get<double>();
  a.box.l = r.get<double>();
  a.box.w = r.get<double>();
  a.box.h = r.get<double>();
  a.box.yaw = r.get<double>();
  a.class_id = checked_class(r.get<std::uint8_t>(), code);
  const auto kind = r.get<std::uint8_t>();
  if (kind > 1) throw Error(code, "unknown provenance tag");
  a.provenance.kind = static_cast<Provenance::Kind>(kind);
  a.provenance.round = r.get<std::uint16_t>();
  if (r.get<std::uint8_t>() != 0) {
    AnnotationMeta m;
    m.truncation = r.get<double>();
    m.occlusion = r.get<std::int32_t>();
    m.bbox2d_height = r.get<double>();
    a.meta = m;
  }
  return a;
}

/// Validates magic and version of a sealed container and returns a reader
/// positioned after the version field.
inline ByteReader open_container(std::span<const std::uint8_t> data, std::string_view magic, std::uint16_t version) {
  if (data.size() < magic.size() + 2 + 4) throw Error(ErrorCode::ChecksumMismatch, "truncated container");
  if (std::memcmp(data.data(), magic.data(), magic.size()) != 0) {
    throw Error(ErrorCode::MalformedBinary, "bad magic, expected " + std::string(magic));
  }
  std::uint16_t found = 0;
  std::memcpy(&found, data.data() + magic.size(), 2);
  if (found != version) {
    throw Error(ErrorCode::VersionMismatch,
                "format version " + std::to_string(found) + ", supported " + std::to_string(version));
  }
  const auto body = verify_crc(data);
  ByteReader r(body, ErrorCode::MalformedBinary);
  r.get_bytes(magic.size() + 2);
  return r;
}

}  // namespace detail

inline Bytes save_scene(const Scene& scene) {
  ByteWriter w;
  w.put_bytes("S3DM");
  w.put(kSceneFormatVersion);
  w.put(static_cast<std::uint32_t>(scene.points.size()));
  w.put(static_cast<std::uint32_t>(scene.annotations.size()));
  w.put_string(scene.id);
  for (const Point& p : scene.points) {
    w.put(static_cast<float>(p.x));
    w.put(static_cast<float>(p.y));
    w.put(static_cast<float>(p.z));
    w.put(static_cast<float>(p.intensity));
  }
  for (const Annotation& a : scene.annotations) detail::write_annotation(w, a);
  if (scene.has_latent()) {
    const auto& latent = scene.latent_gt(LatentAccess::data_tools());
    w.put(std::uint8_t{1});
    w.put(static_cast<std::uint32_t>(latent.size()));
    for (const LatentObject& o : latent) {
      detail::write_annotation(w, o.annotation);
      w.put(o.uid);
    }
  } else {
    w.put(std::uint8_t{0});
  }
  w.seal();
  return w.take();
}

inline Scene load_scene(std::span<const std::uint8_t> data) {
  ByteReader r = detail::open_container(data, "S3DM", kSceneFormatVersion);
  const auto npts = r.get<std::uint32_t>();
  const auto nann = r.get<std::uint32_t>();
  Scene scene;
  scene.id = r.get_string();
  if (r.remaining() < std::size_t{npts} * 16) throw Error(ErrorCode::MalformedBinary, "point payload truncated");
  scene.points.resize(npts);
  for (auto& p : scene.points) {
    p.x = r.get<float>();
    p.y = r.get<float>();
    p.z = r.get<float>();
    p.intensity = r.get<float>();
  }
  scene.annotations.reserve(nann);
  for (std::uint32_t i = 0; i < nann; ++i) scene.annotations.push_back(detail::read_annotation(r, ErrorCode::MalformedBinary));
  if (r.get<std::uint8_t>() != 0) {
    const auto n = r.get<std::uint32_t>();
    std::vector<LatentObject> latent;
    latent.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
      LatentObject o;
      o.annotation = detail::read_annotation(r, ErrorCode::MalformedBinary);
      o.uid = r.get<std::uint64_t>();
      latent.push_back(o);
    }
    scene.set_latent(std::move(latent), LatentAccess::data_tools());
  }
  if (r.remaining() != 0) throw Error(ErrorCode::MalformedBinary, "trailing bytes in scene payload");
  return scene;
}

/// Writes one `<id>.s3dm` file per scene.
inline void save_dataset(const std::filesystem::path& dir, const std::vector<Scene>& scenes) {
  std::filesystem::create_directories(dir);
  for (const Scene& s : scenes) write_file(dir / (s.id + ".s3dm"), save_scene(s));
}

/// Loads every `.s3dm` file in the directory, ordered by file name.
inline std::vector<Scene> load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error(ErrorCode::Io, "not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".s3dm") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Scene> scenes;
  scenes.reserve(files.size());
  for (const auto& f : files) scenes.push_back(load_scene(read_file(f)));
  return scenes;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

struct SizePrior {
  double l = 1, w = 1, h = 1;
};

inline PerClass<SizePrior> default_size_priors() {
  return {SizePrior{4.0, 1.7, 1.6}, SizePrior{0.8, 0.6, 1.7}, SizePrior{1.8, 0.6, 1.7}};
}

struct SynthConfig {
  int num_scenes = 300;
  int objects_min = 4;
  int objects_max = 8;
  PerClass<double> class_weights{0.5, 0.25, 0.25};
  PerClass<SizePrior> size_priors = default_size_priors();
  double size_jitter = 0.08;  // relative stddev on each dimension
  double range_min = 5.0;
  double range_max = 50.0;
  double half_fov = 1.2;  // radians either side of +x
  // Object point count: density_coef * (l*h + w*h) / range^density_exponent.
  double density_coef = 6000.0;
  double density_exponent = 1.6;
  int min_object_points = 4;
  int ground_points = 1500;
  int clutter_clusters = 12;
  int clutter_cluster_points = 10;
  double placement_gap = 0.6;  // meters of clearance between objects
  std::string id_prefix = "sim";
  int id_offset = 0;

  void validate() const {
    if (num_scenes < 0 || objects_min < 0 || objects_max < objects_min)
      throw Error(ErrorCode::ConfigInvalid, "bad scene/object counts");
    if (!(range_min > 0) || !(range_max > range_min)) throw Error(ErrorCode::ConfigInvalid, "bad range interval");
    double total = 0;
    for (ClassId c : kAllClasses) {
      if (class_weights[c] < 0) throw Error(ErrorCode::ConfigInvalid, "negative class weight");
      total += class_weights[c];
      const auto& s = size_priors[c];
      if (!(s.l > 0 && s.w > 0 && s.h > 0)) throw Error(ErrorCode::ConfigInvalid, "non-positive size prior");
    }
    if (!(total > 0)) throw Error(ErrorCode::ConfigInvalid, "class weights sum to zero");
    if (!(density_coef > 0) || density_exponent < 0) throw Error(ErrorCode::ConfigInvalid, "bad density model");
    if (ground_points < 0 || clutter_clusters < 0 || clutter_cluster_points < 0)
      throw Error(ErrorCode::ConfigInvalid, "negative point budget");
  }

  /// Expected in-box point count for an object of the given size and range.
  double expected_points(const SizePrior& s, double range) const {
    const double face = s.l * s.h + s.w * s.h;
    return std::max<double>(min_object_points, density_coef * face / std::pow(std::max(range, 1.0), density_exponent));
  }
};

namespace detail {

inline double round_to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

inline Point float_point(double x, double y, double z, double i) {
  return {round_to_float(x), round_to_float(y), round_to_float(z), round_to_float(i)};
}

inline ClassId sample_class(Rng& rng, const PerClass<double>& weights) {
  double total = 0;
  for (ClassId c : kAllClasses) total += weights[c];
  double u = rng.uniform() * total;
  for (ClassId c : kAllClasses) {
    if (u < weights[c]) return c;
    u -= weights[c];
  }
  return ClassId::Car;
}

}  // namespace detail

inline std::string scene_id_for(const std::string& prefix, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "_%06d", index);
  return prefix + buf;
}

inline Scene synthesize_scene(const SynthConfig& cfg, int index, std::uint64_t seed) {
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(index)));
  Scene scene;
  scene.id = scene_id_for(cfg.id_prefix, cfg.id_offset + index);
  std::vector<LatentObject> latent;

  const int count = rng.uniform_int(cfg.objects_min, cfg.objects_max);
  int attempts = 0;
  while (static_cast<int>(latent.size()) < count && attempts < 200 * std::max(count, 1)) {
    ++attempts;
    const ClassId cls = detail::sample_class(rng, cfg.class_weights);
    const SizePrior& prior = cfg.size_priors[cls];
    const double r = rng.uniform(cfg.range_min, cfg.range_max);
    const double az = rng.uniform(-cfg.half_fov, cfg.half_fov);
    Box3D box;
    box.l = prior.l * std::exp(cfg.size_jitter * rng.normal());
    box.w = prior.w * std::exp(cfg.size_jitter * rng.normal());
    box.h = prior.h * std::exp(cfg.size_jitter * rng.normal());
    box.x = r * std::cos(az);
    box.y = r * std::sin(az);
    box.z = 0.5 * box.h;
    box.yaw = normalize_angle(rng.uniform(-kPi, kPi));
    const Box3D padded = enlarge(box, cfg.placement_gap);
    const bool collides = std::any_of(latent.begin(), latent.end(), [&](const LatentObject& o) {
      return bev_intersection_area(padded, enlarge(o.annotation.box, cfg.placement_gap)) > 0.0;
    });
    if (collides) continue;
    Annotation a;
    a.box = box;
    a.class_id = cls;
    latent.push_back({a, mix_seed(hash_string(scene.id), latent.size())});
  }
  if (static_cast<int>(latent.size()) < count) {
    throw Error(ErrorCode::ConfigInvalid, "could not place " + std::to_string(count) + " objects in " + scene.id);
  }

  for (const LatentObject& o : latent) {
    const Box3D& b = o.annotation.box;
    const double expected = cfg.expected_points({b.l, b.w, b.h}, b.range());
    const int n = std::max(cfg.min_object_points, static_cast<int>(std::lround(expected * rng.uniform(0.85, 1.15))));
    for (int k = 0; k < n; ++k) {
      const Point local{0.48 * b.l * rng.uniform(-1, 1), 0.48 * b.w * rng.uniform(-1, 1),
                        0.48 * b.h * rng.uniform(-1, 1), rng.uniform()};
      const Point p = from_box_frame(local, b);
      Point fp = detail::float_point(p.x, p.y, p.z, p.intensity);
      // Rounding can push a point a hair outside a rotated face; pull it back.
      if (!box_contains(b, fp)) fp = detail::float_point(b.x, b.y, b.z, p.intensity);
      scene.points.push_back(fp);
    }
  }

  const double extent = cfg.range_max + 5.0;
  for (int k = 0; k < cfg.ground_points; ++k) {
    const double r = extent * std::sqrt(rng.uniform());
    const double az = rng.uniform(-cfg.half_fov, cfg.half_fov);
    // Ground sits strictly below z = 0, the bottom face of every object.
    const double z = -0.01 - std::abs(rng.normal(0.0, 0.02));
    scene.points.push_back(detail::float_point(r * std::cos(az), r * std::sin(az), z, 0.2 * rng.uniform()));
  }

  for (int k = 0; k < cfg.clutter_clusters; ++k) {
    const double r = rng.uniform(cfg.range_min, extent);
    const double az = rng.uniform(-cfg.half_fov, cfg.half_fov);
    const double cx = r * std::cos(az), cy = r * std::sin(az);
    const double top = rng.uniform(0.5, 2.5);
    Box3D zone{cx, cy, 0.5 * top, 1.0, 1.0, top, 0.0};
    const Box3D zone_pad = enlarge(zone, 0.5);
    const bool near_object = std::any_of(latent.begin(), latent.end(), [&](const LatentObject& o) {
      return bev_intersection_area(zone_pad, o.annotation.box) > 0.0;
    });
    for (int m = 0; m < cfg.clutter_cluster_points; ++m) {
      const double px = cx + rng.uniform(-0.5, 0.5), py = cy + rng.uniform(-0.5, 0.5);
      const double pz = rng.uniform(0.0, top);
      if (near_object) continue;
      scene.points.push_back(detail::float_point(px, py, pz, rng.uniform()));
    }
  }

  scene.set_latent(std::move(latent), LatentAccess::data_tools());
  return scene;
}

inline std::vector<Scene> synthesize_dataset(const SynthConfig& cfg, std::uint64_t seed, unsigned workers = 1) {
  cfg.validate();
  std::vector<Scene> scenes(static_cast<std::size_t>(cfg.num_scenes));
  parallel_for(scenes.size(), workers, [&](std::size_t i) { scenes[i] = synthesize_scene(cfg, static_cast<int>(i), seed); });
  return scenes;
}

// ---------------------------------------------------------------------------
// Sparse splits and annotation noise

enum class SparsifyStrategy { Random, Easy, Hard };

inline std::optional<SparsifyStrategy> parse_strategy(std::string_view s) {
  if (s == "random") return SparsifyStrategy::Random;
  if (s == "easy") return SparsifyStrategy::Easy;
  if (s == "hard") return SparsifyStrategy::Hard;
  return std::nullopt;
}

/// Full truth of a scene: latent objects when present, otherwise its human
/// annotations (which are then promoted to latent truth).
inline std::vector<LatentObject> full_truth(const Scene& s) {
  if (s.has_latent()) return s.latent_gt(LatentAccess::data_tools());
  std::vector<LatentObject> out;
  for (std::size_t i = 0; i < s.annotations.size(); ++i) {
    out.push_back({s.annotations[i], mix_seed(hash_string(s.id), i)});
  }
  return out;
}

inline std::vector<Scene> sparsify(std::vector<Scene> scenes, SparsifyStrategy strategy, int keep_n, Rng& rng) {
  if (keep_n < 1) throw Error(ErrorCode::ConfigInvalid, "keep_n must be >= 1");
  for (Scene& s : scenes) {
    std::vector<LatentObject> truth = full_truth(s);
    if (truth.empty()) throw Error(ErrorCode::EmptyScene, "scene " + s.id + " has no objects");
    std::vector<std::size_t> order(truth.size());
    std::iota(order.begin(), order.end(), 0);
    auto trunc = [&](std::size_t i) {
      const auto& m = truth[i].annotation.meta;
      return m ? m->truncation : 0.0;
    };
    auto range = [&](std::size_t i) { return truth[i].annotation.box.range(); };
    switch (strategy) {
      case SparsifyStrategy::Random:
        rng.shuffle(order);
        break;
      case SparsifyStrategy::Easy:
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
          if (range(a) != range(b)) return range(a) < range(b);
          return trunc(a) < trunc(b);
        });
        break;
      case SparsifyStrategy::Hard:
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
          if (range(a) != range(b)) return range(a) > range(b);
          return trunc(a) > trunc(b);
        });
        break;
    }
    const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(keep_n), truth.size());
    std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
    std::sort(chosen.begin(), chosen.end());
    s.annotations.clear();
    for (std::size_t i : chosen) {
      Annotation a = truth[i].annotation;
      a.provenance = Provenance::human();
      s.annotations.push_back(a);
    }
    if (!s.has_latent()) s.set_latent(std::move(truth), LatentAccess::data_tools());
  }
  return scenes;
}

/// Box jittered until its 3D IoU with `box` falls inside [lo, hi].
inline Box3D jitter_to_iou(const Box3D& box, double lo, double hi, Rng& rng) {
  double sigma = 0.2;
  for (;;) {
    int too_high = 0, too_low = 0;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      Box3D j = box;
      const double du = rng.normal(0.0, sigma * box.l);
      const double dv = rng.normal(0.0, sigma * box.w);
      const double c = std::cos(box.yaw), s = std::sin(box.yaw);
      j.x += du * c - dv * s;
      j.y += du * s + dv * c;
      j.z += rng.normal(0.0, sigma * box.h);
      j.l *= std::exp(rng.normal(0.0, 0.5 * sigma));
      j.w *= std::exp(rng.normal(0.0, 0.5 * sigma));
      j.h *= std::exp(rng.normal(0.0, 0.5 * sigma));
      j.yaw = normalize_angle(j.yaw + rng.normal(0.0, sigma));
      const double iou = iou_3d(box, j);
      if (iou >= lo && iou <= hi) return j;
      (iou > hi ? too_high : too_low)++;
    }
    sigma *= too_high >= too_low ? 1.5 : 1.0 / 1.5;
  }
}

inline std::vector<Scene> perturb_annotations(std::vector<Scene> scenes, double ratio, double iou_lo, double iou_hi,
                                              Rng& rng) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw Error(ErrorCode::ConfigInvalid, "ratio must be in [0,1]");
  if (!(iou_lo > 0.0 && iou_lo < iou_hi && iou_hi < 1.0)) throw Error(ErrorCode::ConfigInvalid, "need 0 < lo < hi < 1");
  std::vector<std::pair<std::size_t, std::size_t>> human;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    for (std::size_t a = 0; a < scenes[s].annotations.size(); ++a) {
      if (scenes[s].annotations[a].provenance.is_human()) human.emplace_back(s, a);
    }
  }
  const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(human.size())));
  rng.shuffle(human);
  human.resize(k);
  std::sort(human.begin(), human.end());
  for (auto [s, a] : human) {
    Annotation& ann = scenes[s].annotations[a];
    ann.box = jitter_to_iou(ann.box, iou_lo, iou_hi, rng);
  }
  return scenes;
}

}  // namespace ss3d
