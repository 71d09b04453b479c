// SPDX-License-Identifier: Apache-2.0
//
// The outer training loop: bank seeding, sparse pre-training, then rounds of
// instance mining, background mining and teacher/student updates on
// generated scenes; plus the streaming variant with a bounded scene memory.
#pragma once

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "ss3d/background.hpp"
#include "ss3d/bank.hpp"
#include "ss3d/dataio.hpp"
#include "ss3d/detector.hpp"
#include "ss3d/eval.hpp"
#include "ss3d/exchange.hpp"
#include "ss3d/mining.hpp"
#include "ss3d/scenegen.hpp"

namespace ss3d {

struct PerturbConfig {
  double ratio = 0.0;
  double iou_lo = 0.45;
  double iou_hi = 0.55;
};

struct DatasetConfig {
  std::string source = "synthetic";  // synthetic | native | kitti
  std::string path;                  // directory for native / kitti
  SynthConfig synth;
  std::string strategy = "random";
  int keep_n = 1;
  std::optional<PerturbConfig> perturb;
  int unlabeled_scenes = 0;     // synthetic unlabeled pool attached to the training set
  int validation_scenes = 100;  // synthetic held-out set
  double validation_fraction = 0.2;  // held-out share for native / kitti sources
};

struct StreamingConfig {
  int initial = 200;
  int batch = 100;
  int batches = 6;
  int memory_cap = 100;
  int rounds_per_batch = 2;
};

/// Routes teacher inference through the file-exchange protocol.
struct ExternalDetectorConfig {
  std::string workdir;
  int timeout_ms = 30000;
};

struct RunConfig {
  std::uint64_t seed = 0;
  unsigned workers = 1;
  int total_rounds = 5;
  int inner_steps = 4;
  int pretrain_steps = 4;
  double tau_low = 0.01;
  double alpha = 0.5;
  double gamma = 0.5;
  int t_down = 0;  // 0 selects ceil(0.8 * total_rounds)
  int histogram_bins = 20;
  int histogram_min_count = 20;
  double dedup_iou = 0.3;
  double match_iou = 0.1;
  double margin = 0.0;
  PerClass<double> d_min = PerClass<double>::filled(5.0);
  PerClass<double> d0_default = PerClass<double>::filled(60.0);
  PerClass<int> placement_targets = default_placement_targets();
  bool mining = true;
  bool use_cls = true;
  bool use_cons = true;
  bool use_density = true;
  OracleConfig oracle;
  TrainRule train_rule;
  DatasetConfig dataset;
  std::optional<StreamingConfig> streaming;
  std::optional<ExternalDetectorConfig> external;

  int effective_t_down() const {
    return t_down > 0 ? t_down : std::max(1, static_cast<int>(std::ceil(0.8 * total_rounds)));
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::ConfigInvalid, m); };
    if (total_rounds < 1) fail("total_rounds must be >= 1");
    if (inner_steps < 1) fail("inner_steps must be >= 1");
    if (pretrain_steps < 0) fail("pretrain_steps must be >= 0");
    if (!(tau_low > 0 && tau_low < 1)) fail("tau_low must lie in (0,1)");
    if (!(alpha >= 0 && alpha <= 1)) fail("alpha must lie in [0,1]");
    if (!(gamma >= 0 && gamma <= 1)) fail("gamma must lie in [0,1]");
    if (t_down < 0) fail("t_down must be >= 0");
    if (histogram_bins < 2) fail("histogram_bins must be >= 2");
    if (histogram_min_count < 0) fail("histogram_min_count must be >= 0");
    if (!(dedup_iou >= 0 && dedup_iou <= 1)) fail("dedup_iou must lie in [0,1]");
    if (!(match_iou >= 0 && match_iou <= 1)) fail("match_iou must lie in [0,1]");
    if (margin < 0) fail("margin must be >= 0");
    for (ClassId c : kAllClasses) {
      if (d_min[c] < 0 || d0_default[c] < d_min[c]) fail("need 0 <= d_min <= d0_default");
      if (placement_targets[c] < 0) fail("placement targets must be >= 0");
    }
    if (dataset.source != "synthetic" && dataset.source != "native" && dataset.source != "kitti")
      fail("dataset.source must be synthetic, native or kitti");
    if (dataset.source != "synthetic" && dataset.path.empty()) fail("dataset.path is required for " + dataset.source);
    if (!parse_strategy(dataset.strategy)) fail("unknown sparsify strategy " + dataset.strategy);
    if (dataset.keep_n < 1) fail("keep_n must be >= 1");
    if (dataset.unlabeled_scenes < 0 || dataset.validation_scenes < 0) fail("scene counts must be >= 0");
    if (!(dataset.validation_fraction >= 0 && dataset.validation_fraction < 1)) fail("validation_fraction in [0,1)");
    dataset.synth.validate();
    if (streaming) {
      const auto& s = *streaming;
      if (s.initial < 1 || s.batch < 1 || s.batches < 0 || s.rounds_per_batch < 1) fail("bad streaming sizes");
      if (s.memory_cap < s.batch) fail("memory_cap must be >= batch");
      if (dataset.source != "synthetic") fail("streaming runs need a synthetic source");
    }
    if (external && external->timeout_ms <= 0) fail("external.timeout_ms must be positive");
  }
};

// ---------------------------------------------------------------------------
// JSON

namespace detail {

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end() && !it->is_null()) out = it->template get<T>();
}

template <typename T>
void read_per_class(const nlohmann::json& j, const char* key, PerClass<T>& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  if (it->is_number()) {
    out = PerClass<T>::filled(it->template get<T>());
    return;
  }
  if (!it->is_object()) throw Error(ErrorCode::ConfigInvalid, std::string(key) + " must be a number or per-class object");
  for (const auto& [name, v] : it->items()) {
    auto c = parse_class(name);
    if (!c) throw Error(ErrorCode::ConfigInvalid, "unknown class " + name + " in " + key);
    out[*c] = v.template get<T>();
  }
}

template <typename T>
nlohmann::json per_class_json(const PerClass<T>& v) {
  nlohmann::json j = nlohmann::json::object();
  for (ClassId c : kAllClasses) j[std::string(class_name(c))] = v[c];
  return j;
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::ConfigInvalid, "run config must be a JSON object");
  RunConfig c;
  try {
    using detail::read_opt;
    using detail::read_per_class;
    read_opt(j, "seed", c.seed);
    read_opt(j, "workers", c.workers);
    read_opt(j, "total_rounds", c.total_rounds);
    read_opt(j, "inner_steps", c.inner_steps);
    read_opt(j, "pretrain_steps", c.pretrain_steps);
    read_opt(j, "tau_low", c.tau_low);
    read_opt(j, "alpha", c.alpha);
    read_opt(j, "gamma", c.gamma);
    read_opt(j, "t_down", c.t_down);
    read_opt(j, "histogram_bins", c.histogram_bins);
    read_opt(j, "histogram_min_count", c.histogram_min_count);
    read_opt(j, "dedup_iou", c.dedup_iou);
    read_opt(j, "match_iou", c.match_iou);
    read_opt(j, "margin", c.margin);
    read_per_class(j, "d_min", c.d_min);
    read_per_class(j, "d0_default", c.d0_default);
    read_per_class(j, "placement_targets", c.placement_targets);
    read_opt(j, "mining", c.mining);
    read_opt(j, "use_cls", c.use_cls);
    read_opt(j, "use_cons", c.use_cons);
    read_opt(j, "use_density", c.use_density);
    if (auto it = j.find("oracle"); it != j.end()) {
      auto& o = c.oracle;
      read_per_class(*it, "competence", o.competence);
      read_per_class(*it, "loc_noise", o.loc_noise);
      read_opt(*it, "rho_sat", o.rho_sat);
      read_opt(*it, "mu_tp", o.mu_tp);
      read_opt(*it, "mu_fp", o.mu_fp);
      read_opt(*it, "sigma_score", o.sigma_score);
      read_opt(*it, "fp_rate", o.fp_rate);
      read_opt(*it, "dup_rate", o.dup_rate);
      read_opt(*it, "dup_jitter", o.dup_jitter);
      read_opt(*it, "weak_rate", o.weak_rate);
      read_opt(*it, "weak_rho", o.weak_rho);
      read_opt(*it, "mu_weak", o.mu_weak);
      read_opt(*it, "sigma_weak", o.sigma_weak);
      read_opt(*it, "weak_noise", o.weak_noise);
    }
    if (auto it = j.find("train_rule"); it != j.end()) {
      read_opt(*it, "w0", c.train_rule.w0);
      read_opt(*it, "w1", c.train_rule.w1);
      read_opt(*it, "coverage_iou", c.train_rule.coverage_iou);
      read_opt(*it, "purity_iou", c.train_rule.purity_iou);
    }
    if (auto it = j.find("dataset"); it != j.end()) {
      auto& d = c.dataset;
      read_opt(*it, "source", d.source);
      read_opt(*it, "path", d.path);
      read_opt(*it, "strategy", d.strategy);
      read_opt(*it, "keep_n", d.keep_n);
      read_opt(*it, "unlabeled_scenes", d.unlabeled_scenes);
      read_opt(*it, "validation_scenes", d.validation_scenes);
      read_opt(*it, "validation_fraction", d.validation_fraction);
      if (auto p = it->find("perturb"); p != it->end() && !p->is_null()) {
        PerturbConfig pc;
        read_opt(*p, "ratio", pc.ratio);
        read_opt(*p, "iou_lo", pc.iou_lo);
        read_opt(*p, "iou_hi", pc.iou_hi);
        d.perturb = pc;
      }
      if (auto s = it->find("synth"); s != it->end()) {
        auto& sc = d.synth;
        read_opt(*s, "num_scenes", sc.num_scenes);
        read_opt(*s, "objects_min", sc.objects_min);
        read_opt(*s, "objects_max", sc.objects_max);
        read_per_class(*s, "class_weights", sc.class_weights);
        read_opt(*s, "size_jitter", sc.size_jitter);
        read_opt(*s, "range_min", sc.range_min);
        read_opt(*s, "range_max", sc.range_max);
        read_opt(*s, "half_fov", sc.half_fov);
        read_opt(*s, "density_coef", sc.density_coef);
        read_opt(*s, "density_exponent", sc.density_exponent);
        read_opt(*s, "min_object_points", sc.min_object_points);
        read_opt(*s, "ground_points", sc.ground_points);
        read_opt(*s, "clutter_clusters", sc.clutter_clusters);
        read_opt(*s, "clutter_cluster_points", sc.clutter_cluster_points);
        read_opt(*s, "placement_gap", sc.placement_gap);
      }
    }
    if (auto it = j.find("streaming"); it != j.end() && !it->is_null()) {
      StreamingConfig s;
      read_opt(*it, "initial", s.initial);
      read_opt(*it, "batch", s.batch);
      read_opt(*it, "batches", s.batches);
      read_opt(*it, "memory_cap", s.memory_cap);
      read_opt(*it, "rounds_per_batch", s.rounds_per_batch);
      c.streaming = s;
    }
    if (auto it = j.find("external"); it != j.end() && !it->is_null()) {
      ExternalDetectorConfig e;
      read_opt(*it, "workdir", e.workdir);
      read_opt(*it, "timeout_ms", e.timeout_ms);
      c.external = e;
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, std::string("run config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Round log

struct RoundLog {
  int round = 0;
  std::optional<int> batch;  // streaming only
  bool mined = false;
  std::size_t inserted = 0;
  PerClass<std::size_t> bank_size = PerClass<std::size_t>::filled(0);
  std::size_t bank_pseudo = 0;
  std::optional<Thresholds> thresholds;
  std::size_t working_scenes = 0;
  std::size_t memory_scenes = 0;
  PerClass<double> student_competence = PerClass<double>::filled(0.0);
  PerClass<double> teacher_competence = PerClass<double>::filled(0.0);
  EvalReport report;
};

inline nlohmann::json round_log_to_json(const RoundLog& l) {
  nlohmann::json th = nullptr;
  if (l.thresholds) {
    th = {{"cls", detail::per_class_json(l.thresholds->cls)},
          {"cons", detail::per_class_json(l.thresholds->cons)},
          {"density", detail::per_class_json(l.thresholds->density)},
          {"pooled", detail::per_class_json(l.thresholds->pooled)}};
  }
  return {{"round", l.round},
          {"batch", l.batch ? nlohmann::json(*l.batch) : nlohmann::json()},
          {"mined", l.mined},
          {"inserted", l.inserted},
          {"bank_size", detail::per_class_json(l.bank_size)},
          {"bank_pseudo", l.bank_pseudo},
          {"thresholds", th},
          {"working_scenes", l.working_scenes},
          {"memory_scenes", l.memory_scenes},
          {"student_competence", detail::per_class_json(l.student_competence)},
          {"teacher_competence", detail::per_class_json(l.teacher_competence)},
          {"eval", eval_report_to_json(l.report)}};
}

inline std::string round_logs_to_jsonl(const std::vector<RoundLog>& logs) {
  std::string out;
  for (const RoundLog& l : logs) out += round_log_to_json(l).dump() + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Data preparation

struct PreparedData {
  std::vector<Scene> train;       // sparse labeled scenes, then any unlabeled pool
  std::vector<Scene> validation;  // held-out scenes with latent truth
  std::vector<Scene> stream;      // unlabeled scenes for streaming batches
};

/// Reads a KITTI-layout directory (label_2/, calib/, velodyne/) in id order.
inline std::vector<Scene> load_kitti_directory(const std::filesystem::path& root, bool fov_filter = false) {
  namespace fs = std::filesystem;
  const fs::path labels = root / "label_2", calibs = root / "calib", velo = root / "velodyne";
  if (!fs::is_directory(labels)) throw Error(ErrorCode::Io, "missing directory " + labels.string());
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(labels)) {
    if (e.path().extension() == ".txt") ids.push_back(e.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());
  std::vector<Scene> scenes;
  for (const std::string& id : ids) {
    const Bytes bin = read_file(velo / (id + ".bin"));
    scenes.push_back(load_kitti_scene(id, read_text_file(labels / (id + ".txt")),
                                      read_text_file(calibs / (id + ".txt")), bin, fov_filter));
  }
  return scenes;
}

namespace detail {

inline SynthConfig with_prefix(SynthConfig c, const std::string& prefix, int n) {
  c.id_prefix = prefix;
  c.num_scenes = n;
  c.id_offset = 0;
  return c;
}

inline std::vector<Scene> unlabeled(std::vector<Scene> scenes) {
  for (Scene& s : scenes) s.annotations.clear();
  return scenes;
}

}  // namespace detail

inline PreparedData prepare_data(const RunConfig& cfg) {
  const auto& d = cfg.dataset;
  PreparedData out;
  std::vector<Scene> labeled;
  if (d.source == "synthetic") {
    const int n = cfg.streaming ? cfg.streaming->initial : d.synth.num_scenes;
    labeled = synthesize_dataset(detail::with_prefix(d.synth, d.synth.id_prefix, n), mix_seed(cfg.seed, 11), cfg.workers);
    out.validation =
        synthesize_dataset(detail::with_prefix(d.synth, "val", d.validation_scenes), mix_seed(cfg.seed, 12), cfg.workers);
    if (d.unlabeled_scenes > 0) {
      out.stream = detail::unlabeled(synthesize_dataset(detail::with_prefix(d.synth, "unl", d.unlabeled_scenes),
                                                        mix_seed(cfg.seed, 13), cfg.workers));
    }
    if (cfg.streaming) {
      const int total = cfg.streaming->batch * cfg.streaming->batches;
      out.stream = detail::unlabeled(
          synthesize_dataset(detail::with_prefix(d.synth, "stream", total), mix_seed(cfg.seed, 14), cfg.workers));
    }
  } else {
    std::vector<Scene> all = d.source == "native" ? load_dataset(d.path) : load_kitti_directory(d.path);
    std::erase_if(all, [](const Scene& s) { return s.annotations.empty() && !s.has_latent(); });
    if (all.empty()) throw Error(ErrorCode::DatasetEmpty, "no scenes under " + d.path);
    const auto token = LatentAccess::data_tools();
    for (Scene& s : all) {
      if (!s.has_latent()) s.set_latent(full_truth(s), token);
    }
    const auto n_val = static_cast<std::size_t>(std::floor(d.validation_fraction * static_cast<double>(all.size())));
    out.validation.assign(all.end() - static_cast<std::ptrdiff_t>(n_val), all.end());
    labeled.assign(all.begin(), all.end() - static_cast<std::ptrdiff_t>(n_val));
  }
  if (labeled.empty()) throw Error(ErrorCode::DatasetEmpty, "no training scenes");
  Rng rng(mix_seed(cfg.seed, 21));
  out.train = sparsify(std::move(labeled), *parse_strategy(d.strategy), d.keep_n, rng);
  if (d.perturb && d.perturb->ratio > 0) {
    Rng prng(mix_seed(cfg.seed, 22));
    out.train = perturb_annotations(std::move(out.train), d.perturb->ratio, d.perturb->iou_lo, d.perturb->iou_hi, prng);
  }
  if (!cfg.streaming && !out.stream.empty()) {
    for (Scene& s : out.stream) out.train.push_back(std::move(s));
    out.stream.clear();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline

struct RunResult {
  std::vector<RoundLog> logs;
  InstanceBank bank;
  DetectorParams teacher;
  DetectorParams student;
  std::vector<DetectorParams> student_history;  // student after every inner step, in order
  std::vector<Scene> memory;                     // streaming memory after the last batch
};

class Pipeline {
 public:
  Pipeline(RunConfig cfg, PreparedData data) : cfg_(std::move(cfg)), data_(std::move(data)) {
    cfg_.validate();
    if (data_.train.empty()) throw Error(ErrorCode::DatasetEmpty, "no training scenes");
    for (const Scene& s : data_.validation) val_truth_.push_back(annotations_of_truth(s));
    mining_cfg_.match_iou = cfg_.match_iou;
    mining_cfg_.dedup_iou = cfg_.dedup_iou;
    mining_cfg_.histogram_bins = cfg_.histogram_bins;
    mining_cfg_.histogram_min_count = static_cast<std::size_t>(cfg_.histogram_min_count);
    mining_cfg_.use_cls = cfg_.use_cls;
    mining_cfg_.use_cons = cfg_.use_cons;
    mining_cfg_.use_density = cfg_.use_density;
    bg_cfg_.tau_low = cfg_.tau_low;
    bg_cfg_.margin = cfg_.margin;
    cs_.d_min = cfg_.d_min;
    cs_.t_down = cfg_.effective_t_down();
  }

  /// Offline loop over the training scenes.
  RunResult run() {
    working_ = data_.train;
    bank_ = bank_init(working_);
    pretrain();
    init_curriculum();
    for (int t = 1; t <= cfg_.total_rounds; ++t) result_.logs.push_back(round(t, t > 1, std::nullopt));
    return finish();
  }

  /// Offline loop on the initial set, then each incoming batch is mined and
  /// trained together with a bounded memory of generated scenes.
  RunResult run_streaming() {
    if (!cfg_.streaming) throw Error(ErrorCode::ConfigInvalid, "streaming section missing");
    const StreamingConfig& sc = *cfg_.streaming;
    working_ = data_.train;
    bank_ = bank_init(working_);
    pretrain();
    init_curriculum();
    int t = 1;
    for (; t <= cfg_.total_rounds; ++t) result_.logs.push_back(round(t, t > 1, 0));
    refresh_memory(0);

    for (int b = 1; b <= sc.batches; ++b) {
      const auto begin = static_cast<std::size_t>((b - 1) * sc.batch);
      const auto end = std::min(data_.stream.size(), begin + static_cast<std::size_t>(sc.batch));
      if (begin >= end) break;
      working_ = memory_;
      bank_ = bank_init(working_, true);
      for (std::size_t i = begin; i < end; ++i) {
        working_.push_back(data_.stream[i]);
        bank_.track(data_.stream[i].id);
      }
      for (int r = 0; r < sc.rounds_per_batch; ++r, ++t) result_.logs.push_back(round(t, true, b));
      refresh_memory(b);
    }
    result_.memory = memory_;
    return finish();
  }

 private:
  static std::vector<Annotation> annotations_of_truth(const Scene& s) {
    std::vector<Annotation> out;
    for (const LatentObject& o : s.latent_gt(LatentAccess::evaluator())) out.push_back(o.annotation);
    return out;
  }

  DetectFn oracle_fn(const DetectorParams& params) const {
    return [params](const Scene& s, const InferOptions& o, std::uint64_t seed) {
      return infer(params, s, o, seed, LatentAccess::oracle());
    };
  }

  DetectFn teacher_fn() const {
    if (!cfg_.external) return oracle_fn(teacher_);
    const auto workdir = std::filesystem::path(cfg_.external->workdir);
    const auto timeout = std::chrono::milliseconds(cfg_.external->timeout_ms);
    return [workdir, timeout, mu = std::make_shared<std::mutex>()](const Scene& s, const InferOptions& o, std::uint64_t) {
      std::lock_guard lock(*mu);
      return external_exchange(workdir, s, o, timeout);
    };
  }

  std::uint64_t seed(std::uint64_t tag, std::uint64_t a = 0, std::uint64_t b = 0) const {
    return mix_seed(cfg_.seed, tag, a, b);
  }

  void pretrain() {
    student_ = make_oracle_params(cfg_.oracle);
    for (int k = 0; k < cfg_.pretrain_steps; ++k) {
      student_ = train_student(student_, working_, cfg_.gamma, LatentAccess::oracle(), cfg_.train_rule);
    }
    teacher_ = student_;
  }

  void init_curriculum() {
    cs_.d0 = init_density(teacher_fn(), working_, seed(31), cfg_.d0_default, standard_infer_options(), workers());
    for (ClassId c : kAllClasses) cs_.d0[c] = std::max(cs_.d0[c], cs_.d_min[c]);
  }

  unsigned workers() const { return cfg_.external ? 1u : cfg_.workers; }

  RoundLog round(int t, bool mine, std::optional<int> batch) {
    RoundLog log;
    log.round = t;
    log.batch = batch;
    const DetectFn teacher = teacher_fn();
    const std::size_t n = working_.size();

    if (mine && cfg_.mining) {
      cs_.t = t;
      std::vector<std::vector<Candidate>> cands(n);
      parallel_for(n, workers(), [&](std::size_t i) {
        Rng aug(seed(41, static_cast<std::uint64_t>(t), i));
        cands[i] = build_candidates(teacher, working_[i], aug, seed(42, static_cast<std::uint64_t>(t)), mining_cfg_);
      });
      const Thresholds th = compute_thresholds(cands, cs_, mining_cfg_);
      std::vector<std::vector<Annotation>> mined(n);
      parallel_for(n, workers(), [&](std::size_t i) {
        std::vector<Box3D> existing;
        for (const BankEntry& e : bank_.entries(working_[i].id)) existing.push_back(e.box);
        for (const Annotation& a : working_[i].annotations) {
          if (a.provenance.is_human()) existing.push_back(a.box);
        }
        mined[i] = select_and_mine(cands[i], existing, th, t, mining_cfg_);
      });
      for (std::size_t i = 0; i < n; ++i) {
        log.inserted += bank_insert(bank_, working_[i].id, mined[i], working_[i].points,
                                    static_cast<std::uint16_t>(t), cfg_.dedup_iou);
      }
      log.mined = true;
      log.thresholds = th;
    }

    std::vector<BrokenScene> broken(n);
    parallel_for(n, workers(), [&](std::size_t i) {
      broken[i] = mine_background(teacher, working_[i], bank_.entries(working_[i].id), bg_cfg_,
                                  seed(51, static_cast<std::uint64_t>(t)));
    });
    RemovalCounts removal;
    for (std::size_t i = 0; i < n; ++i) removal += background_removal_counts(broken[i], working_[i], LatentAccess::evaluator());

    const BankPool pool(bank_);
    const LatentIndex latent_index = build_latent_index(working_);
    std::vector<Scene> generated(n);
    for (int k = 0; k < cfg_.inner_steps; ++k) {
      parallel_for(n, workers(), [&](std::size_t i) {
        Rng rng(seed(61, static_cast<std::uint64_t>(t) * 1000 + static_cast<std::uint64_t>(k), i));
        generated[i] = generate_confident_scene(broken[i], pool, cfg_.placement_targets, rng, &latent_index);
      });
      student_ = train_student(student_, generated, cfg_.gamma, LatentAccess::oracle(), cfg_.train_rule);
      teacher_ = ema_update(teacher_, student_, cfg_.alpha);
      result_.student_history.push_back(student_);
    }
    last_generated_ = std::move(generated);

    log.bank_size = bank_.size_by_class();
    log.bank_pseudo = bank_.pseudo_count();
    log.working_scenes = n;
    log.memory_scenes = memory_.size();
    for (ClassId c : kAllClasses) {
      log.student_competence[c] = student_.competence(c);
      log.teacher_competence[c] = teacher_.competence(c);
    }
    log.report = evaluate(t);
    log.report.mining = mining_quality(bank_, working_, LatentAccess::evaluator());
    log.report.removal_recall = removal.recall();
    return log;
  }

  EvalReport evaluate(int t) const {
    EvalReport rep;
    rep.round = t;
    if (data_.validation.empty()) return rep;
    std::vector<std::vector<Detection>> dets(data_.validation.size());
    const DetectorParams student = student_;
    parallel_for(dets.size(), cfg_.workers, [&](std::size_t i) {
      dets[i] = infer(student, data_.validation[i], standard_infer_options(), seed(71),
                      LatentAccess::oracle());
    });
    rep.ap = evaluate_detections(dets, val_truth_);
    rep.map_moderate = moderate_map(rep.ap);
    return rep;
  }

  void refresh_memory(int batch) {
    std::vector<std::size_t> idx(last_generated_.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed(81, static_cast<std::uint64_t>(batch)));
    rng.shuffle(idx);
    idx.resize(std::min(idx.size(), static_cast<std::size_t>(cfg_.streaming->memory_cap)));
    std::sort(idx.begin(), idx.end());
    std::vector<Scene> next;
    for (std::size_t i : idx) next.push_back(last_generated_[i]);
    memory_ = std::move(next);
  }

  RunResult finish() {
    result_.bank = bank_;
    result_.teacher = teacher_;
    result_.student = student_;
    return std::move(result_);
  }

  RunConfig cfg_;
  PreparedData data_;
  std::vector<std::vector<Annotation>> val_truth_;
  MiningConfig mining_cfg_;
  BackgroundConfig bg_cfg_;
  CurriculumState cs_;
  std::vector<Scene> working_;
  std::vector<Scene> memory_;
  std::vector<Scene> last_generated_;
  InstanceBank bank_;
  DetectorParams teacher_, student_;
  RunResult result_;
};

inline RunResult run(const RunConfig& cfg) { return Pipeline(cfg, prepare_data(cfg)).run(); }

inline RunResult run_streaming(const RunConfig& cfg) { return Pipeline(cfg, prepare_data(cfg)).run_streaming(); }

}  // namespace ss3d
