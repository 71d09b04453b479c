// SPDX-License-Identifier: Apache-2.0
//
// Reliable background mining: drop every point inside any low-threshold,
// un-suppressed teacher prediction, then refill the bank objects so the
// remaining background can be trusted.
#pragma once

#include <span>
#include <vector>

#include "ss3d/bank.hpp"
#include "ss3d/dataio.hpp"
#include "ss3d/detector.hpp"
#include "ss3d/geometry.hpp"
#include "ss3d/mining.hpp"

namespace ss3d {

struct BrokenScene {
  Scene scene;
  std::size_t removed_point_count = 0;   // original points dropped (predictions and bank regions)
  std::size_t refilled_point_count = 0;  // bank points inserted
  std::vector<std::size_t> kept_original_indices;  // original points that survived, in order
};

struct BackgroundConfig {
  double tau_low = 0.01;
  bool nms = false;
  double nms_iou = 0.1;
  double margin = 0.0;  // enlargement of predicted boxes before deletion
};

/// Builds the broken scene from the teacher's predictions `dets` and the
/// scene's bank entries.
inline BrokenScene break_scene(const Scene& scene, std::span<const Detection> dets, std::span<const BankEntry> entries,
                               double margin = 0.0) {
  std::vector<bool> drop(scene.points.size(), false);
  for (const Detection& d : dets) {
    for (std::size_t i : points_in_box(scene.points, enlarge(d.box, margin))) drop[i] = true;
  }
  for (const BankEntry& e : entries) {
    for (std::size_t i : points_in_box(scene.points, e.box)) drop[i] = true;
  }

  BrokenScene out;
  out.scene = scene;  // keeps id and any latent truth
  out.scene.points.clear();
  out.scene.annotations.clear();
  for (std::size_t i = 0; i < scene.points.size(); ++i) {
    if (drop[i]) continue;
    out.kept_original_indices.push_back(i);
    out.scene.points.push_back(scene.points[i]);
  }
  out.removed_point_count = scene.points.size() - out.kept_original_indices.size();
  for (const BankEntry& e : entries) {
    for (const Point& p : e.world_points()) out.scene.points.push_back(p);
    out.refilled_point_count += e.points_local.size();
    out.scene.annotations.push_back(e.annotation());
  }
  return out;
}

inline BrokenScene mine_background(const DetectFn& teacher, const Scene& scene, std::span<const BankEntry> entries,
                                   const BackgroundConfig& cfg, std::uint64_t seed) {
  if (!(cfg.tau_low > 0.0 && cfg.tau_low < 1.0)) throw Error(ErrorCode::ConfigInvalid, "tau_low must lie in (0,1)");
  InferOptions opts;
  opts.score_threshold = cfg.tau_low;
  opts.nms = cfg.nms;
  opts.nms_iou = cfg.nms_iou;
  const auto dets = teacher(scene, opts, seed);
  return break_scene(scene, dets, entries, cfg.margin);
}

}  // namespace ss3d
