// SPDX-License-Identifier: Apache-2.0
//
// KITTI-style average precision, difficulty buckets, and the simulation-only
// pipeline metrics (mining quality, background removal recall).
#pragma once

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cstdio>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "ss3d/background.hpp"
#include "ss3d/bank.hpp"
#include "ss3d/dataio.hpp"
#include "ss3d/detector.hpp"

namespace ss3d {

inline double class_iou_threshold(ClassId c) { return c == ClassId::Car ? 0.7 : 0.5; }

/// Interpolated-precision sample points.
inline std::vector<double> recall_positions(int positions) {
  std::vector<double> r;
  if (positions == 40) {
    for (int i = 1; i <= 40; ++i) r.push_back(i / 40.0);
  } else if (positions == 11) {
    for (int i = 0; i <= 10; ++i) r.push_back(i / 10.0);
  } else {
    throw Error(ErrorCode::ConfigInvalid, "recall positions must be 11 or 40");
  }
  return r;
}

enum class MatchOutcome : std::uint8_t { TruePositive, FalsePositive, Discarded };

struct ScoredOutcome {
  double score;
  MatchOutcome outcome;
};

namespace detail {

inline bool detection_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  const auto& x = a.box;
  const auto& y = b.box;
  return std::tie(x.x, x.y, x.z, x.l, x.w, x.h, x.yaw) < std::tie(y.x, y.y, y.z, y.l, y.w, y.h, y.yaw);
}

}  // namespace detail

/// Greedy matching of one scene's detections in descending score order. Each
/// ground truth is used once; a detection takes the unused ground truth of
/// highest IoU3D at or above the threshold, preferring counted over ignored
/// ones. A detection matched to an ignored ground truth is discarded.
inline std::vector<ScoredOutcome> match_detections(std::vector<Detection> dets, std::span<const Box3D> gts,
                                                   double iou_thresh, std::span<const std::uint8_t> ignored = {}) {
  auto is_ignored = [&](std::size_t g) { return !ignored.empty() && ignored[g] != 0; };
  std::sort(dets.begin(), dets.end(), detail::detection_before);
  std::vector<bool> used(gts.size(), false);
  std::vector<ScoredOutcome> out;
  out.reserve(dets.size());
  for (const Detection& d : dets) {
    double best = -1.0, best_ign = -1.0;
    std::size_t gi = 0, gi_ign = 0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g]) continue;
      const double iou = iou_3d(d.box, gts[g]);
      if (iou < iou_thresh) continue;
      if (is_ignored(g)) {
        if (iou > best_ign) best_ign = iou, gi_ign = g;
      } else if (iou > best) {
        best = iou, gi = g;
      }
    }
    if (best >= 0.0) {
      used[gi] = true;
      out.push_back({d.score, MatchOutcome::TruePositive});
    } else if (best_ign >= 0.0) {
      used[gi_ign] = true;
      out.push_back({d.score, MatchOutcome::Discarded});
    } else {
      out.push_back({d.score, MatchOutcome::FalsePositive});
    }
  }
  return out;
}

/// AP in [0,100] from match outcomes (any order; sorted stably by score) and
/// the number of counted ground truths. nullopt when there are none.
inline std::optional<double> ap_from_outcomes(std::vector<ScoredOutcome> outcomes, std::size_t n_pos, int positions) {
  const auto rs = recall_positions(positions);
  if (n_pos == 0) return std::nullopt;
  std::stable_sort(outcomes.begin(), outcomes.end(),
                   [](const ScoredOutcome& a, const ScoredOutcome& b) { return a.score > b.score; });
  std::vector<std::pair<double, double>> curve;  // (recall, precision) after each counted detection
  std::size_t tp = 0, fp = 0;
  for (const ScoredOutcome& o : outcomes) {
    if (o.outcome == MatchOutcome::Discarded) continue;
    (o.outcome == MatchOutcome::TruePositive ? tp : fp)++;
    curve.emplace_back(static_cast<double>(tp) / static_cast<double>(n_pos),
                       static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  double sum = 0.0;
  for (double r : rs) {
    double p = 0.0;
    for (const auto& [rk, pk] : curve) {
      if (rk >= r - 1e-12) p = std::max(p, pk);
    }
    sum += p;
  }
  return 100.0 * sum / static_cast<double>(rs.size());
}

/// Average precision in [0,100] over one class of one scene. Ground truths
/// flagged in `ignored` neither count as positives nor turn their matches
/// into false positives. nullopt when no ground truth is counted.
inline std::optional<double> compute_ap(std::vector<Detection> dets, std::span<const Box3D> gts, double iou_thresh,
                                        int positions, std::span<const std::uint8_t> ignored = {}) {
  std::size_t n_pos = 0;
  for (std::size_t g = 0; g < gts.size(); ++g) n_pos += ignored.empty() || ignored[g] == 0;
  return ap_from_outcomes(match_detections(std::move(dets), gts, iou_thresh, ignored), n_pos, positions);
}

enum class Difficulty : std::uint8_t { Easy = 0, Moderate = 1, Hard = 2, Ignored = 3 };
inline constexpr std::array<Difficulty, 3> kDifficulties = {Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard};

inline std::string_view difficulty_name(Difficulty d) {
  switch (d) {
    case Difficulty::Easy: return "Easy";
    case Difficulty::Moderate: return "Moderate";
    case Difficulty::Hard: return "Hard";
    case Difficulty::Ignored: break;
  }
  return "Ignored";
}

/// KITTI gates when label metadata is present, otherwise range bands.
inline Difficulty difficulty_bucket(const Annotation& a) {
  if (a.meta) {
    const AnnotationMeta& m = *a.meta;
    if (m.bbox2d_height >= 40 && m.occlusion <= 0 && m.truncation <= 0.15) return Difficulty::Easy;
    if (m.bbox2d_height >= 25 && m.occlusion <= 1 && m.truncation <= 0.30) return Difficulty::Moderate;
    if (m.bbox2d_height >= 25 && m.occlusion <= 2 && m.truncation <= 0.50) return Difficulty::Hard;
    return Difficulty::Ignored;
  }
  const double r = a.box.range();
  if (r <= 20.0) return Difficulty::Easy;
  if (r <= 40.0) return Difficulty::Moderate;
  return Difficulty::Hard;
}

struct ApPair {
  std::optional<double> ap11;
  std::optional<double> ap40;
};

/// Per class, per difficulty (Easy, Moderate, Hard). A difficulty level
/// counts every ground truth at that level or easier; harder ones are ignored.
using ApTable = PerClass<std::array<ApPair, 3>>;

inline ApTable evaluate_detections(const std::vector<std::vector<Detection>>& dets,
                                   const std::vector<std::vector<Annotation>>& gts) {
  if (dets.size() != gts.size()) throw Error(ErrorCode::ConfigInvalid, "detections and ground truth differ in scene count");
  ApTable table;
  for (ClassId c : kAllClasses) {
    for (std::size_t di = 0; di < kDifficulties.size(); ++di) {
      std::vector<ScoredOutcome> outcomes;
      std::size_t n_pos = 0;
      for (std::size_t s = 0; s < gts.size(); ++s) {
        std::vector<Box3D> boxes;
        std::vector<std::uint8_t> ign;
        for (const Annotation& a : gts[s]) {
          if (a.class_id != c) continue;
          boxes.push_back(a.box);
          const Difficulty d = difficulty_bucket(a);
          const bool skip = d == Difficulty::Ignored || static_cast<std::size_t>(d) > di;
          ign.push_back(skip);
          n_pos += !skip;
        }
        std::vector<Detection> mine;
        for (const Detection& d : dets[s]) {
          if (d.class_id == c) mine.push_back(d);
        }
        auto o = match_detections(std::move(mine), boxes, class_iou_threshold(c), ign);
        outcomes.insert(outcomes.end(), o.begin(), o.end());
      }
      table[c][di].ap11 = ap_from_outcomes(outcomes, n_pos, 11);
      table[c][di].ap40 = ap_from_outcomes(std::move(outcomes), n_pos, 40);
    }
  }
  return table;
}

/// Mean over classes of Moderate AP (classes without ground truth skipped).
inline std::optional<double> moderate_map(const ApTable& t, int positions = 40) {
  double sum = 0;
  int n = 0;
  for (ClassId c : kAllClasses) {
    if (const auto& v = positions == 11 ? t[c][1].ap11 : t[c][1].ap40) {
      sum += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

// ---------------------------------------------------------------------------
// Pipeline metrics (need latent truth)

struct MiningQuality {
  std::optional<double> precision;  // nullopt when there are no pseudo entries
  double recall = 0.0;              // latent objects missed by human seeds that a pseudo entry matches
  double coverage = 0.0;            // latent objects matched by any entry
  std::size_t pseudo = 0;
  std::size_t pseudo_correct = 0;
  std::size_t latent = 0;
  std::size_t covered = 0;
};

struct MiningQualityReport {
  PerClass<MiningQuality> per_class;
  MiningQuality overall;
};

inline MiningQualityReport mining_quality(const InstanceBank& bank, const std::vector<Scene>& scenes,
                                          const LatentAccess& access) {
  PerClass<std::size_t> pseudo{}, correct{}, latent_n{}, covered{}, missing{}, missing_found{};
  for (const Scene& s : scenes) {
    if (!s.has_latent()) throw Error(ErrorCode::LatentUnavailable, "scene " + s.id + " has no latent truth");
    const auto& latent = s.latent_gt(access);
    const auto& entries = bank.tracks(s.id) ? bank.entries(s.id) : std::vector<BankEntry>{};
    auto matches = [](const BankEntry& e, const LatentObject& o) {
      return e.class_id == o.annotation.class_id &&
             iou_3d(e.box, o.annotation.box) >= class_iou_threshold(e.class_id);
    };
    for (const BankEntry& e : entries) {
      if (!e.provenance.is_pseudo()) continue;
      pseudo[e.class_id]++;
      correct[e.class_id] += std::any_of(latent.begin(), latent.end(), [&](const LatentObject& o) { return matches(e, o); });
    }
    for (const LatentObject& o : latent) {
      const ClassId c = o.annotation.class_id;
      latent_n[c]++;
      bool by_human = false, by_pseudo = false;
      for (const BankEntry& e : entries) {
        if (!matches(e, o)) continue;
        (e.provenance.is_human() ? by_human : by_pseudo) = true;
      }
      covered[c] += by_human || by_pseudo;
      if (!by_human) {
        missing[c]++;
        missing_found[c] += by_pseudo;
      }
    }
  }
  auto make = [](std::size_t p, std::size_t ok, std::size_t lat, std::size_t cov, std::size_t miss,
                 std::size_t found) {
    MiningQuality q;
    q.pseudo = p;
    q.pseudo_correct = ok;
    q.latent = lat;
    q.covered = cov;
    if (p > 0) q.precision = static_cast<double>(ok) / p;
    q.coverage = lat > 0 ? static_cast<double>(cov) / lat : 0.0;
    q.recall = miss > 0 ? static_cast<double>(found) / miss : 0.0;
    return q;
  };
  MiningQualityReport rep;
  std::size_t tp = 0, tok = 0, tl = 0, tc = 0, tm = 0, tf = 0;
  for (ClassId c : kAllClasses) {
    rep.per_class[c] = make(pseudo[c], correct[c], latent_n[c], covered[c], missing[c], missing_found[c]);
    tp += pseudo[c], tok += correct[c], tl += latent_n[c], tc += covered[c], tm += missing[c], tf += missing_found[c];
  }
  rep.overall = make(tp, tok, tl, tc, tm, tf);
  return rep;
}

struct RemovalCounts {
  std::size_t target_points = 0;   // points of latent objects not represented in the bank
  std::size_t removed_points = 0;  // of those, dropped from the broken scene

  std::optional<double> recall() const {
    if (target_points == 0) return std::nullopt;
    return static_cast<double>(removed_points) / static_cast<double>(target_points);
  }
  RemovalCounts& operator+=(const RemovalCounts& o) {
    target_points += o.target_points;
    removed_points += o.removed_points;
    return *this;
  }
};

/// Points of missing-annotated objects removed from the broken scene. The
/// broken scene's annotations are the bank entries of the scene.
inline RemovalCounts background_removal_counts(const BrokenScene& broken, const Scene& original,
                                               const LatentAccess& access) {
  if (!original.has_latent()) throw Error(ErrorCode::LatentUnavailable, "scene " + original.id + " has no latent truth");
  std::vector<bool> kept(original.points.size(), false);
  for (std::size_t i : broken.kept_original_indices) kept[i] = true;
  RemovalCounts rc;
  for (const LatentObject& o : original.latent_gt(access)) {
    const bool in_bank = std::any_of(broken.scene.annotations.begin(), broken.scene.annotations.end(),
                                     [&](const Annotation& a) {
                                       return a.class_id == o.annotation.class_id &&
                                              iou_3d(a.box, o.annotation.box) >= class_iou_threshold(a.class_id);
                                     });
    if (in_bank) continue;
    for (std::size_t i : points_in_box(original.points, o.annotation.box)) {
      rc.target_points++;
      rc.removed_points += !kept[i];
    }
  }
  return rc;
}

inline std::optional<double> background_removal_recall(const BrokenScene& broken, const Scene& original,
                                                       const LatentAccess& access) {
  return background_removal_counts(broken, original, access).recall();
}

// ---------------------------------------------------------------------------
// Report

struct EvalReport {
  int round = 0;
  ApTable ap;
  std::optional<double> map_moderate;
  std::optional<MiningQualityReport> mining;
  std::optional<double> removal_recall;
};

namespace detail {
inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }
}  // namespace detail

inline nlohmann::json mining_quality_to_json(const MiningQuality& q) {
  return {{"precision", detail::opt_json(q.precision)},
          {"recall", q.recall},
          {"coverage", q.coverage},
          {"pseudo", q.pseudo},
          {"pseudo_correct", q.pseudo_correct},
          {"latent", q.latent},
          {"covered", q.covered}};
}

inline nlohmann::json eval_report_to_json(const EvalReport& r) {
  nlohmann::json ap = nlohmann::json::object();
  for (ClassId c : kAllClasses) {
    nlohmann::json per = nlohmann::json::object();
    for (std::size_t d = 0; d < kDifficulties.size(); ++d) {
      per[std::string(difficulty_name(kDifficulties[d]))] = {{"ap11", detail::opt_json(r.ap[c][d].ap11)},
                                                             {"ap40", detail::opt_json(r.ap[c][d].ap40)}};
    }
    ap[std::string(class_name(c))] = per;
  }
  nlohmann::json j = {{"round", r.round},
                      {"ap", ap},
                      {"map_moderate", detail::opt_json(r.map_moderate)},
                      {"removal_recall", detail::opt_json(r.removal_recall)}};
  if (r.mining) {
    nlohmann::json m = nlohmann::json::object();
    for (ClassId c : kAllClasses) m[std::string(class_name(c))] = mining_quality_to_json(r.mining->per_class[c]);
    m["overall"] = mining_quality_to_json(r.mining->overall);
    j["mining"] = m;
  } else {
    j["mining"] = nullptr;
  }
  return j;
}

inline std::string csv_header() { return "round,class,difficulty,ap11,ap40\n"; }

/// One row per class and difficulty; undefined values are left empty.
inline std::string eval_report_csv_rows(const EvalReport& r) {
  std::ostringstream os;
  auto cell = [](const std::optional<double>& v) {
    if (!v) return std::string();
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", *v);
    return std::string(buf);
  };
  for (ClassId c : kAllClasses) {
    for (std::size_t d = 0; d < kDifficulties.size(); ++d) {
      os << r.round << ',' << class_name(c) << ',' << difficulty_name(kDifficulties[d]) << ',' << cell(r.ap[c][d].ap11)
         << ',' << cell(r.ap[c][d].ap40) << '\n';
    }
  }
  return os.str();
}

}  // namespace ss3d
