// SPDX-License-Identifier: Apache-2.0
//
// Instance bank: per-scene store of annotated objects with their cropped
// points in the canonical object frame. Entries are only ever added.
//
// Bank file v1 (little-endian):
//   "S3DB" u16 version
//   u32 scene count, then each tracked scene id (u32 length + bytes)
//   u32 entry count, then per entry:
//     scene id (u32 length + bytes), f64 x7 box, u8 class, u8 provenance kind,
//     u16 provenance round, u16 round added, u8 has score [f64 score],
//     u32 point count, f64 x4 per point
//   u32 CRC32 of everything before it
#pragma once

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ss3d/binio.hpp"
#include "ss3d/core.hpp"
#include "ss3d/dataio.hpp"
#include "ss3d/geometry.hpp"

namespace ss3d {

struct BankEntry {
  std::string scene_id;
  Box3D box;
  ClassId class_id = ClassId::Car;
  PointSet points_local;
  Provenance provenance;
  std::optional<double> score;
  std::uint16_t round_added = 0;

  bool operator==(const BankEntry&) const = default;

  Annotation annotation() const {
    Annotation a;
    a.box = box;
    a.class_id = class_id;
    a.provenance = provenance;
    return a;
  }
  /// Entry points at the stored pose.
  PointSet world_points() const {
    PointSet out;
    out.reserve(points_local.size());
    for (const Point& p : points_local) out.push_back(from_box_frame(p, box));
    return out;
  }
};

inline constexpr double kBankDedupIou = 0.3;

class InstanceBank {
 public:
  /// Registers a scene (possibly with no entries). Idempotent.
  void track(const std::string& scene_id) {
    if (entries_.emplace(scene_id, std::vector<BankEntry>{}).second) order_.push_back(scene_id);
  }
  bool tracks(const std::string& scene_id) const { return entries_.count(scene_id) != 0; }

  const std::vector<BankEntry>& entries(const std::string& scene_id) const {
    auto it = entries_.find(scene_id);
    if (it == entries_.end()) throw Error(ErrorCode::UnknownScene, "scene " + scene_id + " is not in the bank");
    return it->second;
  }

  /// Appends unless the entry overlaps an existing one of the same scene
  /// beyond `dedup_iou` in BEV. Returns whether it was added.
  bool add(BankEntry e, double dedup_iou = kBankDedupIou) {
    auto it = entries_.find(e.scene_id);
    if (it == entries_.end()) throw Error(ErrorCode::UnknownScene, "scene " + e.scene_id + " is not in the bank");
    for (const BankEntry& other : it->second) {
      if (rotated_bev_iou(other.box, e.box) > dedup_iou) return false;
    }
    it->second.push_back(std::move(e));
    return true;
  }

  const std::vector<std::string>& scene_ids() const { return order_; }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& [id, v] : entries_) n += v.size();
    return n;
  }
  PerClass<std::size_t> size_by_class() const {
    auto out = PerClass<std::size_t>::filled(0);
    for (const auto& [id, v] : entries_) {
      for (const BankEntry& e : v) out[e.class_id]++;
    }
    return out;
  }
  std::size_t pseudo_count() const {
    std::size_t n = 0;
    for (const auto& [id, v] : entries_) {
      for (const BankEntry& e : v) n += e.provenance.kind == Provenance::Kind::Pseudo;
    }
    return n;
  }

  bool operator==(const InstanceBank& o) const { return order_ == o.order_ && entries_ == o.entries_; }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, std::vector<BankEntry>> entries_;
};

/// Crops the annotation's points from the scene and stores them in the
/// canonical object frame.
inline BankEntry make_bank_entry(const std::string& scene_id, const Annotation& ann, std::span<const Point> scene_points,
                                 std::uint16_t round_added, std::optional<double> score = std::nullopt) {
  BankEntry e;
  e.scene_id = scene_id;
  e.box = ann.box;
  e.class_id = ann.class_id;
  e.provenance = ann.provenance;
  e.score = score;
  e.round_added = round_added;
  for (std::size_t i : points_in_box(scene_points, ann.box)) e.points_local.push_back(to_box_frame(scene_points[i], ann.box));
  return e;
}

/// One entry per human annotation; every scene is tracked, labeled or not.
/// With `include_pseudo`, pseudo annotations already on the scenes are kept too.
inline InstanceBank bank_init(const std::vector<Scene>& scenes, bool include_pseudo = false) {
  InstanceBank bank;
  for (const Scene& s : scenes) {
    bank.track(s.id);
    for (const Annotation& a : s.annotations) {
      if (a.provenance.kind == Provenance::Kind::Pseudo && !include_pseudo) continue;
      bank.add(make_bank_entry(s.id, a, s.points, a.provenance.round));
    }
  }
  return bank;
}

inline std::size_t bank_insert(InstanceBank& bank, const std::string& scene_id, const std::vector<Annotation>& mined,
                               std::span<const Point> scene_points, std::uint16_t round,
                               double dedup_iou = kBankDedupIou) {
  if (!bank.tracks(scene_id)) throw Error(ErrorCode::UnknownScene, "scene " + scene_id + " is not in the bank");
  std::size_t inserted = 0;
  for (const Annotation& a : mined) inserted += bank.add(make_bank_entry(scene_id, a, scene_points, round), dedup_iou);
  return inserted;
}

// ---------------------------------------------------------------------------
// Bank file

inline constexpr std::uint16_t kBankFormatVersion = 1;

inline Bytes save_bank(const InstanceBank& bank) {
  ByteWriter w;
  w.put_bytes("S3DB");
  w.put(kBankFormatVersion);
  w.put(static_cast<std::uint32_t>(bank.scene_ids().size()));
  for (const std::string& id : bank.scene_ids()) w.put_string(id);
  w.put(static_cast<std::uint32_t>(bank.size()));
  for (const std::string& id : bank.scene_ids()) {
    for (const BankEntry& e : bank.entries(id)) {
      w.put_string(e.scene_id);
      for (double v : {e.box.x, e.box.y, e.box.z, e.box.l, e.box.w, e.box.h, e.box.yaw}) w.put(v);
      w.put(static_cast<std::uint8_t>(e.class_id));
      w.put(static_cast<std::uint8_t>(e.provenance.kind));
      w.put(e.provenance.round);
      w.put(e.round_added);
      w.put(static_cast<std::uint8_t>(e.score.has_value()));
      if (e.score) w.put(*e.score);
      w.put(static_cast<std::uint32_t>(e.points_local.size()));
      for (const Point& p : e.points_local) {
        for (double v : {p.x, p.y, p.z, p.intensity}) w.put(v);
      }
    }
  }
  w.seal();
  return w.take();
}

inline InstanceBank load_bank(std::span<const std::uint8_t> data) {
  ByteReader r = detail::open_container(data, "S3DB", kBankFormatVersion);
  InstanceBank bank;
  const auto scenes = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < scenes; ++i) bank.track(r.get_string());
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    BankEntry e;
    e.scene_id = r.get_string();
    double b[7];
    for (double& v : b) v = r.get<double>();
    e.box = {b[0], b[1], b[2], b[3], b[4], b[5], b[6]};
    e.class_id = detail::checked_class(r.get<std::uint8_t>(), ErrorCode::MalformedBinary);
    const auto kind = r.get<std::uint8_t>();
    if (kind > 1) throw Error(ErrorCode::MalformedBinary, "unknown provenance kind");
    e.provenance.kind = static_cast<Provenance::Kind>(kind);
    e.provenance.round = r.get<std::uint16_t>();
    e.round_added = r.get<std::uint16_t>();
    if (r.get<std::uint8_t>() != 0) e.score = r.get<double>();
    const auto n = r.get<std::uint32_t>();
    if (static_cast<std::size_t>(n) * 32 > r.remaining()) throw Error(ErrorCode::MalformedBinary, "point count exceeds file");
    e.points_local.resize(n);
    for (Point& p : e.points_local) {
      p.x = r.get<double>();
      p.y = r.get<double>();
      p.z = r.get<double>();
      p.intensity = r.get<double>();
    }
    if (!bank.tracks(e.scene_id)) throw Error(ErrorCode::MalformedBinary, "entry for untracked scene " + e.scene_id);
    bank.add(std::move(e), 1.0);  // stored entries were already deduplicated
  }
  if (r.remaining() != 0) throw Error(ErrorCode::MalformedBinary, "trailing bytes after bank entries");
  return bank;
}

}  // namespace ss3d
