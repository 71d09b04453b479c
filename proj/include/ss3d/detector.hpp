// SPDX-License-Identifier: Apache-2.0
//
// Detector abstraction backed by an oracle simulator: detections are drawn
// from the latent truth with a competence-dependent miss rate, localization
// noise, false positives and (without NMS) near-duplicates. Student training
// moves per-class competence toward a target set by the coverage and purity
// of the training annotations; the teacher follows by EMA.
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ss3d/core.hpp"
#include "ss3d/dataio.hpp"
#include "ss3d/geometry.hpp"

namespace ss3d {

struct Detection {
  Box3D box;
  ClassId class_id = ClassId::Car;
  double score = 0.0;
  bool operator==(const Detection&) const = default;
};

/// Named real-valued parameter vector. Layout (the ordered name list) is fixed
/// at construction; EMA and training operate element-wise on it.
class DetectorParams {
 public:
  DetectorParams() = default;

  void add(std::string name, double value) {
    index_.emplace(name, names_.size());
    names_.push_back(std::move(name));
    values_.push_back(value);
  }
  bool has(std::string_view name) const { return index_.find(std::string(name)) != index_.end(); }
  double get(std::string_view name) const { return values_.at(slot(name)); }
  void set(std::string_view name, double value) { values_.at(slot(name)) = value; }

  const std::vector<std::string>& names() const { return names_; }
  const std::vector<double>& values() const { return values_; }
  std::vector<double>& values() { return values_; }
  std::size_t size() const { return values_.size(); }

  bool same_layout(const DetectorParams& o) const { return names_ == o.names_; }
  bool operator==(const DetectorParams& o) const { return names_ == o.names_ && values_ == o.values_; }

  static std::string key(std::string_view field, ClassId c) {
    return std::string(field) + "." + std::string(class_name(c));
  }
  double competence(ClassId c) const { return clamp01(get(key("competence", c))); }

 private:
  std::size_t slot(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw Error(ErrorCode::LayoutMismatch, "unknown parameter " + std::string(name));
    return it->second;
  }

  std::vector<std::string> names_;
  std::vector<double> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Calibration of the oracle simulator. Values are starting points; the
/// competence entries are what training moves.
struct OracleConfig {
  PerClass<double> competence = PerClass<double>::filled(0.0);
  PerClass<double> loc_noise = PerClass<double>::filled(0.6);  // relative box noise at competence 0, rho 1
  PerClass<SizePrior> size_priors = default_size_priors();
  double rho_sat = 30.0;
  double mu_tp = 0.85;
  double mu_fp = 0.25;
  double sigma_score = 0.08;
  double fp_rate = 4.0;  // per class per 70 m x 70 m at competence 0
  double dup_rate = 2.0;
  double dup_jitter = 0.12;
  // Low-confidence proposals for objects the confident path misses.
  double weak_rate = 0.995;
  double weak_rho = 2.0;
  double mu_weak = 0.05;
  double sigma_weak = 0.015;
  double weak_noise = 0.05;
};

inline DetectorParams make_oracle_params(const OracleConfig& cfg = {}) {
  DetectorParams p;
  for (ClassId c : kAllClasses) p.add(DetectorParams::key("competence", c), clamp01(cfg.competence[c]));
  for (ClassId c : kAllClasses) p.add(DetectorParams::key("loc_noise", c), cfg.loc_noise[c]);
  for (ClassId c : kAllClasses) {
    p.add(DetectorParams::key("prior_l", c), cfg.size_priors[c].l);
    p.add(DetectorParams::key("prior_w", c), cfg.size_priors[c].w);
    p.add(DetectorParams::key("prior_h", c), cfg.size_priors[c].h);
  }
  p.add("rho_sat", cfg.rho_sat);
  p.add("mu_tp", cfg.mu_tp);
  p.add("mu_fp", cfg.mu_fp);
  p.add("sigma_score", cfg.sigma_score);
  p.add("fp_rate", cfg.fp_rate);
  p.add("dup_rate", cfg.dup_rate);
  p.add("dup_jitter", cfg.dup_jitter);
  p.add("weak_rate", cfg.weak_rate);
  p.add("weak_rho", cfg.weak_rho);
  p.add("mu_weak", cfg.mu_weak);
  p.add("sigma_weak", cfg.sigma_weak);
  p.add("weak_noise", cfg.weak_noise);
  for (double v : p.values()) {
    if (!std::isfinite(v)) throw Error(ErrorCode::ConfigInvalid, "non-finite oracle parameter");
  }
  return p;
}

struct InferOptions {
  double score_threshold = 0.1;  // keep detections with score > threshold
  bool nms = true;
  double nms_iou = 0.1;  // BEV IoU above which a lower-scored box is suppressed
};

inline InferOptions standard_infer_options() { return {}; }

/// Greedy score-descending NMS within each class on BEV IoU.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const Detection& d : dets) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.class_id == d.class_id && rotated_bev_iou(k.box, d.box) > iou_threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

namespace detail {

struct BoxNoise {
  std::array<double, 7> n{};
  static BoxNoise draw(Rng& rng) {
    BoxNoise b;
    for (double& v : b.n) v = rng.normal();
    return b;
  }
};

/// Perturbs a box with noise relative to its own dimensions.
inline Box3D perturb_box(const Box3D& src, double rel, const BoxNoise& z) {
  Box3D b = src;
  const double c = std::cos(src.yaw), s = std::sin(src.yaw);
  const double du = z.n[0] * rel * src.l, dv = z.n[1] * rel * src.w;
  b.x += du * c - dv * s;
  b.y += du * s + dv * c;
  b.z += z.n[2] * rel * src.h;
  b.l *= std::exp(0.5 * rel * z.n[3]);
  b.w *= std::exp(0.5 * rel * z.n[4]);
  b.h *= std::exp(0.5 * rel * z.n[5]);
  b.yaw = normalize_angle(b.yaw + 0.5 * rel * z.n[6]);
  return b;
}

struct DuplicateDraws {
  std::vector<BoxNoise> noise;
  std::vector<double> score_factor;
  static DuplicateDraws draw(Rng& rng, double dup_rate) {
    DuplicateDraws d;
    const int n = 1 + rng.poisson(dup_rate);
    for (int k = 0; k < n; ++k) {
      d.noise.push_back(BoxNoise::draw(rng));
      d.score_factor.push_back(0.6 + 0.4 * rng.uniform());
    }
    return d;
  }
};

inline void emit_with_duplicates(std::vector<Detection>& out, const Detection& det, const DuplicateDraws& dups,
                                 double jitter, bool emit_dups) {
  out.push_back(det);
  if (!emit_dups) return;
  for (std::size_t k = 0; k < dups.noise.size(); ++k) {
    Detection d = det;
    const auto& z = dups.noise[k];
    const double c = std::cos(det.box.yaw), s = std::sin(det.box.yaw);
    const double du = z.n[0] * jitter * det.box.l, dv = z.n[1] * jitter * det.box.w;
    d.box.x += du * c - dv * s;
    d.box.y += du * s + dv * c;
    d.box.z += z.n[2] * jitter * det.box.h;
    // Near-duplicates only ever grow, spreading coverage around the object.
    d.box.l *= 1.0 + std::abs(z.n[3]) * jitter;
    d.box.w *= 1.0 + std::abs(z.n[4]) * jitter;
    d.box.h *= 1.0 + std::abs(z.n[5]) * jitter;
    d.box.yaw = normalize_angle(d.box.yaw + z.n[6] * jitter);
    d.score = det.score * dups.score_factor[k];
    out.push_back(d);
  }
}

inline std::uint64_t box_hash(const Box3D& b) {
  std::uint64_t h = 0;
  for (double v : {b.x, b.y, b.z, b.l, b.w, b.h, b.yaw}) h = mix_seed(h, std::bit_cast<std::uint64_t>(v));
  return h;
}

}  // namespace detail

/// Oracle inference. Deterministic in (params, scene, opts, seed): every
/// latent object and false-positive stream draws from its own sub-generator,
/// and the number of draws never depends on the parameter values, so a
/// higher competence yields a superset of confident detections.
inline std::vector<Detection> infer(const DetectorParams& params, const Scene& scene, const InferOptions& opts,
                                    std::uint64_t seed, const LatentAccess& access) {
  const auto& latent = scene.latent_gt(access);
  const std::uint64_t base = mix_seed(seed, hash_string(scene.id));
  const double rho_sat = params.get("rho_sat");
  const double mu_tp = params.get("mu_tp"), mu_fp = params.get("mu_fp");
  const double sigma_score = params.get("sigma_score");
  const double dup_rate = params.get("dup_rate"), dup_jitter = params.get("dup_jitter");
  const double weak_rate = params.get("weak_rate"), weak_rho = params.get("weak_rho");
  const double mu_weak = params.get("mu_weak"), sigma_weak = params.get("sigma_weak");
  const double weak_noise = params.get("weak_noise");
  const bool emit_dups = !opts.nms;

  std::vector<Detection> raw;
  for (std::size_t j = 0; j < latent.size(); ++j) {
    const Annotation& obj = latent[j].annotation;
    // Hit/miss and score follow the object; localization noise follows the
    // exact input pose, so an augmented view of the scene sees the same
    // objects with fresh box noise.
    Rng id_rng(mix_seed(base, 1, latent[j].uid));
    Rng view_rng(mix_seed(base, 3, latent[j].uid, detail::box_hash(obj.box)));
    const double rho = static_cast<double>(count_points_in_box(scene.points, obj.box));
    const double comp = params.competence(obj.class_id);
    double fill = 0.0;
    if (rho > 0) fill = rho_sat > 0 ? rho / (rho + rho_sat) : 1.0;
    const double p_detect = std::min(1.0, comp * fill);
    const double p_weak = rho > 0 ? weak_rate * rho / (rho + std::max(weak_rho, 0.0)) : 0.0;

    const double u_detect = id_rng.uniform();
    const double z_score = id_rng.normal();
    const double u_weak = id_rng.uniform();
    const double z_weak = id_rng.normal();
    const auto noise = detail::BoxNoise::draw(view_rng);
    const auto weak = detail::BoxNoise::draw(view_rng);
    const auto dups = detail::DuplicateDraws::draw(view_rng, dup_rate);

    Detection det;
    det.class_id = obj.class_id;
    if (u_detect < p_detect) {
      const double rel = params.get(DetectorParams::key("loc_noise", obj.class_id)) * (1.0 - comp) /
                         std::sqrt(std::max(rho, 1.0));
      det.box = detail::perturb_box(obj.box, rel, noise);
      det.score = clamp01(mu_fp + (mu_tp - mu_fp) * comp + sigma_score * z_score);
    } else if (u_weak < p_weak) {
      det.box = detail::perturb_box(obj.box, weak_noise, weak);
      det.score = clamp01(mu_weak + sigma_weak * z_weak);
    } else {
      continue;
    }
    detail::emit_with_duplicates(raw, det, dups, dup_jitter, emit_dups);
  }

  // False positives over the scene's BEV extent, kept clear of latent objects.
  double xmin = 0, xmax = 0, ymin = 0, ymax = 0;
  if (!scene.points.empty()) {
    xmin = xmax = scene.points[0].x;
    ymin = ymax = scene.points[0].y;
    for (const Point& p : scene.points) {
      xmin = std::min(xmin, p.x);
      xmax = std::max(xmax, p.x);
      ymin = std::min(ymin, p.y);
      ymax = std::max(ymax, p.y);
    }
  }
  const double area_factor = (xmax - xmin) * (ymax - ymin) / (70.0 * 70.0);
  for (ClassId c : kAllClasses) {
    Rng rng(mix_seed(base, 2, class_index(c)));
    const double comp = params.competence(c);
    const int count = rng.poisson(params.get("fp_rate") * (1.0 - comp) * area_factor);
    const Box3D prior{0, 0, 0, params.get(DetectorParams::key("prior_l", c)),
                      params.get(DetectorParams::key("prior_w", c)), params.get(DetectorParams::key("prior_h", c)), 0};
    for (int k = 0; k < count; ++k) {
      std::optional<Box3D> placed;
      for (int attempt = 0; attempt < 20; ++attempt) {
        Box3D b = prior;
        b.x = rng.uniform(xmin, xmax);
        b.y = rng.uniform(ymin, ymax);
        b.z = 0.5 * b.h;
        b.yaw = normalize_angle(rng.uniform(-kPi, kPi));
        const bool clear = std::none_of(latent.begin(), latent.end(), [&](const LatentObject& o) {
          return rotated_bev_iou(o.annotation.box, b) > 0.3;
        });
        if (clear && !placed) placed = b;
      }
      const double z_score = rng.normal();
      const auto dups = detail::DuplicateDraws::draw(rng, dup_rate);
      if (!placed) continue;
      Detection det{*placed, c, clamp01(mu_fp + sigma_score * z_score)};
      // Duplicates of a false positive must stay clear of latent objects too.
      std::vector<Detection> copies;
      detail::emit_with_duplicates(copies, det, dups, dup_jitter, emit_dups);
      for (const Detection& d : copies) {
        const bool clear = std::none_of(latent.begin(), latent.end(), [&](const LatentObject& o) {
          return rotated_bev_iou(o.annotation.box, d.box) > 0.3;
        });
        if (clear) raw.push_back(d);
      }
    }
  }

  std::vector<Detection> kept;
  kept.reserve(raw.size());
  for (const Detection& d : raw) {
    if (d.score > opts.score_threshold) kept.push_back(d);
  }
  if (opts.nms) return nms(std::move(kept), opts.nms_iou);
  std::stable_sort(kept.begin(), kept.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return kept;
}

// ---------------------------------------------------------------------------
// Training

struct ClassTrainStats {
  double coverage = 0.0;
  double purity = 0.0;
  std::size_t latent_objects = 0;
  std::size_t annotations = 0;
};

struct TrainBatchStats {
  PerClass<ClassTrainStats> per_class;
};

struct TrainRule {
  double w0 = 0.3;
  double w1 = 0.65;
  double coverage_iou = 0.5;  // an annotation carries a latent object at this IoU3D
  double purity_iou = 0.7;
};

/// Coverage counts distinct latent objects (by uid) carrying a same-class
/// annotation anywhere in the batch; purity is the share of annotations that
/// match a same-class latent object of their scene.
inline TrainBatchStats compute_train_stats(const std::vector<Scene>& scenes, const LatentAccess& access,
                                           const TrainRule& rule = {}) {
  struct Seen {
    ClassId cls;
    bool covered;
  };
  std::unordered_map<std::uint64_t, Seen> seen;
  std::vector<std::uint64_t> order;
  PerClass<std::size_t> pure = PerClass<std::size_t>::filled(0);
  TrainBatchStats stats;
  for (const Scene& s : scenes) {
    const auto& latent = s.latent_gt(access);
    for (const LatentObject& o : latent) {
      bool covered = std::any_of(s.annotations.begin(), s.annotations.end(), [&](const Annotation& a) {
        return a.class_id == o.annotation.class_id && iou_3d(a.box, o.annotation.box) >= rule.coverage_iou;
      });
      auto [it, inserted] = seen.try_emplace(o.uid, Seen{o.annotation.class_id, covered});
      if (inserted) order.push_back(o.uid);
      else it->second.covered = it->second.covered || covered;
    }
    for (const Annotation& a : s.annotations) {
      stats.per_class[a.class_id].annotations++;
      const bool ok = std::any_of(latent.begin(), latent.end(), [&](const LatentObject& o) {
        return o.annotation.class_id == a.class_id && iou_3d(a.box, o.annotation.box) >= rule.purity_iou;
      });
      if (ok) pure[a.class_id]++;
    }
  }
  PerClass<std::size_t> covered = PerClass<std::size_t>::filled(0);
  for (std::uint64_t uid : order) {
    const Seen& s = seen[uid];
    stats.per_class[s.cls].latent_objects++;
    if (s.covered) covered[s.cls]++;
  }
  for (ClassId c : kAllClasses) {
    auto& st = stats.per_class[c];
    st.coverage = st.latent_objects ? static_cast<double>(covered[c]) / static_cast<double>(st.latent_objects) : 0.0;
    st.purity = st.annotations ? static_cast<double>(pure[c]) / static_cast<double>(st.annotations) : 0.0;
  }
  return stats;
}

/// Competence update from precomputed batch statistics. Classes without any
/// latent object in the batch are left untouched.
inline DetectorParams apply_training_step(const DetectorParams& params, const TrainBatchStats& stats, double gamma,
                                          const TrainRule& rule = {}) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw Error(ErrorCode::ConfigInvalid, "gamma must be in [0,1]");
  DetectorParams out = params;
  for (ClassId c : kAllClasses) {
    const auto& st = stats.per_class[c];
    if (st.latent_objects == 0) continue;
    const double target = clamp01(rule.w0 + rule.w1 * st.coverage * st.purity);
    const double before = params.competence(c);
    const double after = clamp01(before + gamma * (target - before));
    out.set(DetectorParams::key("competence", c), after);
    const double gain = after - before;
    if (gain > 0) {
      const std::string noise_key = DetectorParams::key("loc_noise", c);
      out.set(noise_key, params.get(noise_key) * (1.0 - gain));
    }
  }
  return out;
}

inline DetectorParams train_student(const DetectorParams& params, const std::vector<Scene>& scenes, double gamma,
                                    const LatentAccess& access, const TrainRule& rule = {}) {
  if (scenes.empty()) throw Error(ErrorCode::EmptyTrainingSet, "no training scenes");
  return apply_training_step(params, compute_train_stats(scenes, access, rule), gamma, rule);
}

/// teacher <- alpha * teacher + (1 - alpha) * student, element-wise.
inline DetectorParams ema_update(const DetectorParams& teacher, const DetectorParams& student, double alpha) {
  if (!teacher.same_layout(student)) throw Error(ErrorCode::LayoutMismatch, "teacher and student layouts differ");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorCode::ConfigInvalid, "alpha must be in [0,1]");
  DetectorParams out = teacher;
  auto& v = out.values();
  const auto& s = student.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = alpha * v[i] + (1.0 - alpha) * s[i];
  return out;
}

}  // namespace ss3d
