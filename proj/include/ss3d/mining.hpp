// SPDX-License-Identifier: Apache-2.0
//
// Confident missing-annotated instance mining: candidates from a scene and
// its globally augmented copy, adaptive per-class loss thresholds from the
// steepest histogram descent, the linear density curriculum, and the
// conjunctive selection that turns candidates into pseudo annotations.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "ss3d/core.hpp"
#include "ss3d/dataio.hpp"
#include "ss3d/detector.hpp"
#include "ss3d/geometry.hpp"

namespace ss3d {

/// Any detector: oracle, external process, or a test double.
using DetectFn = std::function<std::vector<Detection>(const Scene&, const InferOptions&, std::uint64_t seed)>;

/// Copy of the scene with points, annotations and latent truth augmented.
inline Scene augment_scene(const Scene& scene, const AugParams& aug, AugDirection dir) {
  Scene out;
  out.id = scene.id;
  out.points = apply_augmentation(scene.points, aug, dir);
  out.annotations = scene.annotations;
  for (Annotation& a : out.annotations) a.box = apply_augmentation(a.box, aug, dir);
  if (scene.has_latent()) {
    const auto token = LatentAccess::data_tools();
    auto latent = scene.latent_gt(token);
    for (LatentObject& o : latent) o.annotation.box = apply_augmentation(o.annotation.box, aug, dir);
    out.set_latent(std::move(latent), token);
  }
  return out;
}

struct Candidate {
  Detection det_orig;
  std::optional<Detection> det_aug;  // matched augmented prediction, mapped back
  double cls_loss = 0.0;
  double cons_loss = 1.0;
  std::size_t density = 0;
};

inline constexpr double kUnmatchedConsistencyLoss = 1.0;

inline double classification_loss(double score) { return -std::log(std::max(score, 1e-7)); }

struct MiningConfig {
  InferOptions infer = standard_infer_options();
  double match_iou = 0.1;
  double dedup_iou = 0.3;
  int histogram_bins = 20;
  std::size_t histogram_min_count = 20;
  bool use_cls = true;
  bool use_cons = true;
  bool use_density = true;
  AugRanges aug;
};

/// One-to-one greedy matching on descending BEV IoU within the same class.
/// Returns, for each element of `a`, the matched index into `b`.
inline std::vector<std::optional<std::size_t>> match_by_bev_iou(std::span<const Detection> a,
                                                                std::span<const Detection> b, double min_iou) {
  struct Pair {
    double iou;
    std::size_t i, k;
  };
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t k = 0; k < b.size(); ++k) {
      if (a[i].class_id != b[k].class_id) continue;
      const double iou = rotated_bev_iou(a[i].box, b[k].box);
      if (iou >= min_iou && iou > 0.0) pairs.push_back({iou, i, k});
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& x, const Pair& y) { return x.iou > y.iou; });
  std::vector<std::optional<std::size_t>> match(a.size());
  std::vector<bool> used(b.size(), false);
  for (const Pair& p : pairs) {
    if (match[p.i] || used[p.k]) continue;
    match[p.i] = p.k;
    used[p.k] = true;
  }
  return match;
}

/// Pairs each teacher prediction on the scene with its prediction on an
/// augmented copy (mapped back through the inverse augmentation).
inline std::vector<Candidate> candidates_from_predictions(const Scene& scene, std::span<const Detection> orig,
                                                          std::span<const Detection> aug_mapped, double match_iou) {
  const auto match = match_by_bev_iou(orig, aug_mapped, match_iou);
  std::vector<Candidate> out;
  out.reserve(orig.size());
  for (std::size_t i = 0; i < orig.size(); ++i) {
    Candidate c;
    c.det_orig = orig[i];
    c.cls_loss = classification_loss(orig[i].score);
    if (match[i]) {
      c.det_aug = aug_mapped[*match[i]];
      c.cons_loss = 1.0 - iou_3d(orig[i].box, c.det_aug->box);
    } else {
      c.cons_loss = kUnmatchedConsistencyLoss;
    }
    c.density = count_points_in_box(scene.points, orig[i].box);
    out.push_back(c);
  }
  return out;
}

inline std::vector<Candidate> build_candidates(const DetectFn& teacher, const Scene& scene, Rng& aug_rng,
                                               std::uint64_t seed, const MiningConfig& cfg = {}) {
  const AugParams aug = sample_augmentation(aug_rng, cfg.aug);
  const auto orig = teacher(scene, cfg.infer, seed);
  const Scene augmented = augment_scene(scene, aug, AugDirection::Forward);
  auto aug_dets = teacher(augmented, cfg.infer, seed);
  for (Detection& d : aug_dets) d.box = apply_augmentation(d.box, aug, AugDirection::Inverse);
  return candidates_from_predictions(scene, orig, aug_dets, cfg.match_iou);
}

// ---------------------------------------------------------------------------
// Adaptive thresholds

/// Linear-interpolated 70th percentile.
inline double percentile70(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  const double pos = 0.7 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

/// Equal-width histogram over [min, max]; the threshold is the right edge of
/// the bin after which the count drops the most. Small or non-descending
/// samples fall back to the 70th percentile.
inline double histogram_breakpoint(std::span<const double> values, int bins, std::size_t min_count = 20) {
  if (values.empty()) throw Error(ErrorCode::EmptyInput, "histogram of no values");
  if (bins < 2) throw Error(ErrorCode::ConfigInvalid, "histogram needs at least 2 bins");
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  const double lo = *mn, hi = *mx;
  std::vector<double> copy(values.begin(), values.end());
  if (values.size() < min_count || !(hi > lo)) return percentile70(std::move(copy));

  const double width = (hi - lo) / bins;
  std::vector<long> hist(static_cast<std::size_t>(bins), 0);
  for (double v : values) {
    auto idx = static_cast<long>(std::floor((v - lo) / width));
    idx = std::clamp<long>(idx, 0, bins - 1);
    hist[static_cast<std::size_t>(idx)]++;
  }
  long best = 0;
  int best_bin = -1;
  for (int i = 0; i + 1 < bins; ++i) {
    const long drop = hist[static_cast<std::size_t>(i)] - hist[static_cast<std::size_t>(i) + 1];
    if (drop > best) {
      best = drop;
      best_bin = i;
    }
  }
  if (best_bin < 0) return percentile70(std::move(copy));
  return lo + (best_bin + 1) * width;
}

struct CurriculumState {
  PerClass<double> d0 = PerClass<double>::filled(60.0);
  PerClass<double> d_min = PerClass<double>::filled(5.0);
  int t = 0;
  int t_down = 1;
};

/// Density threshold for round t: linear decay from d0 to d_min over t_down rounds.
inline double density_lambda(const CurriculumState& cs, ClassId c) {
  const double d0 = cs.d0[c], dmin = cs.d_min[c];
  return std::max(dmin, d0 - (d0 - dmin) / cs.t_down * cs.t);
}

/// Mean in-box point count of the round-0 teacher's detections, pooled over
/// all scenes; classes without detections keep `fallback`.
inline PerClass<double> init_density(const DetectFn& teacher, const std::vector<Scene>& scenes, std::uint64_t seed,
                                     const PerClass<double>& fallback, const InferOptions& opts = {},
                                     unsigned workers = 1) {
  std::vector<PerClass<double>> sums(scenes.size());
  std::vector<PerClass<std::size_t>> counts(scenes.size());
  parallel_for(scenes.size(), workers, [&](std::size_t i) {
    for (const Detection& d : teacher(scenes[i], opts, seed)) {
      sums[i][d.class_id] += static_cast<double>(count_points_in_box(scenes[i].points, d.box));
      counts[i][d.class_id]++;
    }
  });
  PerClass<double> out = fallback;
  for (ClassId c : kAllClasses) {
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      sum += sums[i][c];
      n += counts[i][c];
    }
    if (n > 0) out[c] = sum / static_cast<double>(n);
  }
  return out;
}

struct Thresholds {
  PerClass<double> cls = PerClass<double>::filled(0.0);
  PerClass<double> cons = PerClass<double>::filled(0.0);
  PerClass<double> density = PerClass<double>::filled(0.0);
  PerClass<std::size_t> pooled = PerClass<std::size_t>::filled(0);
};

/// Per-class thresholds pooled across every scene's candidates of the round.
inline Thresholds compute_thresholds(const std::vector<std::vector<Candidate>>& per_scene, const CurriculumState& cs,
                                     const MiningConfig& cfg = {}) {
  Thresholds th;
  for (ClassId c : kAllClasses) {
    std::vector<double> cls, cons;
    for (const auto& cands : per_scene) {
      for (const Candidate& cand : cands) {
        if (cand.det_orig.class_id != c) continue;
        cls.push_back(cand.cls_loss);
        cons.push_back(cand.cons_loss);
      }
    }
    th.pooled[c] = cls.size();
    if (!cls.empty()) {
      th.cls[c] = histogram_breakpoint(cls, cfg.histogram_bins, cfg.histogram_min_count);
      th.cons[c] = histogram_breakpoint(cons, cfg.histogram_bins, cfg.histogram_min_count);
    }
    th.density[c] = density_lambda(cs, c);
  }
  return th;
}

struct SelectionMask {
  bool u = false;  // classification loss below threshold
  bool v = false;  // consistency loss below threshold
  bool k = false;  // in-box density at or above the curriculum threshold
};

inline SelectionMask selection_mask(const Candidate& c, const Thresholds& th) {
  const ClassId cls = c.det_orig.class_id;
  return {c.cls_loss < th.cls[cls], c.cons_loss < th.cons[cls],
          static_cast<double>(c.density) >= th.density[cls]};
}

inline bool is_selected(const Candidate& c, const Thresholds& th, const MiningConfig& cfg = {}) {
  const SelectionMask m = selection_mask(c, th);
  return (m.u || !cfg.use_cls) && (m.v || !cfg.use_cons) && (m.k || !cfg.use_density);
}

/// Selected candidates become pseudo annotations (the teacher's box and class
/// on the original scene), skipping anything overlapping `existing` or an
/// earlier pick beyond the dedup IoU.
inline std::vector<Annotation> select_and_mine(const std::vector<Candidate>& candidates,
                                               std::span<const Box3D> existing, const Thresholds& th, int round,
                                               const MiningConfig& cfg = {}) {
  if (round < 2) throw Error(ErrorCode::ConfigInvalid, "instance mining starts at round 2");
  std::vector<const Candidate*> picked;
  for (const Candidate& c : candidates) {
    if (is_selected(c, th, cfg)) picked.push_back(&c);
  }
  std::stable_sort(picked.begin(), picked.end(),
                   [](const Candidate* a, const Candidate* b) { return a->det_orig.score > b->det_orig.score; });
  std::vector<Box3D> occupied(existing.begin(), existing.end());
  std::vector<Annotation> mined;
  for (const Candidate* c : picked) {
    const bool dup = std::any_of(occupied.begin(), occupied.end(),
                                 [&](const Box3D& b) { return rotated_bev_iou(b, c->det_orig.box) > cfg.dedup_iou; });
    if (dup) continue;
    Annotation a;
    a.box = c->det_orig.box;
    a.class_id = c->det_orig.class_id;
    a.provenance = Provenance::pseudo(round);
    mined.push_back(a);
    occupied.push_back(a.box);
  }
  return mined;
}

}  // namespace ss3d
