// SPDX-License-Identifier: Apache-2.0
//
// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "test_util.hpp"

using namespace ss3d;
using namespace ss3d::test;

namespace {

constexpr double kIouTol = 2e-3;
constexpr double kApTol = 1e-9;
constexpr double kEmaTol = 1e-12;
constexpr int kIouGrid = 400;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Check {
  bool ok = true;
  std::ostringstream detail;
  void require(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      detail << " [failed: " << what << "]";
    }
  }
};

int failures = 0;

void report(int id, const char* name, const std::function<void(Check&)>& body) {
  Check c;
  const auto t0 = Clock::now();
  try {
    body(c);
  } catch (const std::exception& e) {
    c.ok = false;
    c.detail << " [exception: " << e.what() << "]";
  }
  std::printf("%s %2d %-28s %7.2fs%s\n", c.ok ? "PASS" : "FAIL", id, name, seconds_since(t0), c.detail.str().c_str());
  std::fflush(stdout);
  failures += !c.ok;
}

void geometry(Check& c) {
  const auto t0 = Clock::now();
  Rng rng(2024), orng(4048);
  double worst_bev = 0, worst_3d = 0;
  for (int i = 0; i < 1000; ++i) {
    const Box3D a = random_box(rng);
    const Box3D b = nearby_box(rng, a);
    worst_bev = std::max(worst_bev, std::abs(rotated_bev_iou(a, b) - oracle::bev_iou(a, b, kIouGrid, orng)));
    worst_3d = std::max(worst_3d, std::abs(iou_3d(a, b) - oracle::iou3d(a, b, kIouGrid, orng)));
  }
  int mismatched = 0;
  for (int s = 0; s < 100; ++s) {
    PointSet pts;
    for (int i = 0; i < 2000; ++i) pts.push_back({rng.uniform(-12, 12), rng.uniform(-12, 12), rng.uniform(-2, 2), 0});
    for (int k = 0; k < 10; ++k) {
      const Box3D b = random_box(rng);
      mismatched += points_in_box(pts, b) != oracle::points_in_box(pts, b);
    }
  }
  const double secs = seconds_since(t0);
  c.detail << " max|dBEV|=" << worst_bev << " max|d3D|=" << worst_3d << " point mismatches=" << mismatched;
  c.require(worst_bev <= kIouTol, "BEV IoU within 2e-3");
  c.require(worst_3d <= kIouTol, "3D IoU within 2e-3");
  c.require(mismatched == 0, "points_in_box identical");
  c.require(secs < 30.0, "runtime < 30 s");
}

void average_precision(Check& c) {
  const auto t0 = Clock::now();
  const Box3D g1{0, 0, 0.75, 4, 1.8, 1.5, 0}, g2{10, 0, 0.75, 4, 1.8, 1.5, 0};
  const std::vector<Box3D> hand_gts = {g1, g2};
  const std::vector<Detection> hand = {{g1, ClassId::Car, 0.9}, {{40, 0, 0.75, 4, 1.8, 1.5, 0}, ClassId::Car, 0.8}};
  const double h40 = *compute_ap(hand, hand_gts, 0.7, 40), h11 = *compute_ap(hand, hand_gts, 0.7, 11);
  c.require(std::abs(h40 - 50.0) <= kApTol, "hand case 40-pt = 50");
  c.require(std::abs(h11 - 600.0 / 11.0) <= kApTol, "hand case 11-pt = 600/11");

  Rng rng(77);
  double worst = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Box3D> gts;
    const int ng = rng.uniform_int(1, 5);
    for (int g = 0; g < ng; ++g) gts.push_back({10.0 * g, 0, 0.75, 4, 1.8, 1.5, 0});
    std::vector<Detection> dets;
    const int nd = rng.uniform_int(0, 8);
    for (int k = 0; k < nd; ++k) {
      Box3D b = gts[rng.index(gts.size())];
      if (rng.bernoulli(0.3)) {
        b.x += 5.0;
      } else if (rng.bernoulli(0.3)) {
        b.x += rng.uniform(-1, 1);
      }
      dets.push_back({b, ClassId::Car, rng.uniform(0.01, 1.0)});
    }
    std::vector<Detection> sorted = dets;
    std::stable_sort(sorted.begin(), sorted.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<bool> used(gts.size(), false), tp;
    for (const Detection& d : sorted) {
      int best = -1;
      double best_iou = 0.7;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        const double iou = iou_3d(d.box, gts[g]);
        if (!used[g] && iou >= best_iou) best_iou = iou, best = static_cast<int>(g);
      }
      if (best >= 0) used[static_cast<std::size_t>(best)] = true;
      tp.push_back(best >= 0);
    }
    for (int positions : {11, 40}) {
      worst = std::max(worst, std::abs(*compute_ap(dets, gts, 0.7, positions) - oracle::ap(tp, gts.size(), positions)));
    }
  }
  const double secs = seconds_since(t0);
  c.detail << " hand=" << h40 << "/" << h11 << " max|dAP|=" << worst;
  c.require(worst <= kApTol, "random cases within 1e-9");
  c.require(secs < 10.0, "runtime < 10 s");
}

void ema(Check& c) {
  Rng rng(12);
  DetectorParams m0 = make_oracle_params(), s = make_oracle_params();
  for (double& v : m0.values()) v = rng.uniform(-1, 1);
  for (double& v : s.values()) v = rng.uniform(-1, 1);
  double worst = 0;
  for (double alpha : {0.5, 0.9, 0.99, 0.999}) {
    for (int k : {1, 10, 100}) {
      DetectorParams t = m0;
      for (int i = 0; i < k; ++i) t = ema_update(t, s, alpha);
      const double ak = std::pow(alpha, k);
      for (std::size_t i = 0; i < t.size(); ++i) {
        worst = std::max(worst, std::abs(t.values()[i] - (ak * m0.values()[i] + (1 - ak) * s.values()[i])));
      }
    }
  }
  c.detail << " max err=" << worst;
  c.require(worst <= kEmaTol, "closed form within 1e-12");
}

void curriculum(Check& c) {
  CurriculumState cs;
  cs.d0 = PerClass<double>::filled(100);
  cs.d_min = PerClass<double>::filled(20);
  cs.t_down = 8;
  cs.t = 0;
  c.require(density_lambda(cs, ClassId::Car) == 100.0, "lambda(0) = d0");
  for (int t = 8; t <= 12; ++t) {
    cs.t = t;
    c.require(density_lambda(cs, ClassId::Pedestrian) == 20.0, "lambda(t >= T_down) = d_min");
  }
  for (int t = 1; t < 8; ++t) {
    cs.t = t;
    c.require(density_lambda(cs, ClassId::Cyclist) == 100.0 - 10.0 * t, "linear interior");
  }
  cs.t = 4;
  c.detail << " lambda(4)=" << density_lambda(cs, ClassId::Car);
  c.require(density_lambda(cs, ClassId::Car) == 60.0, "t=4 gives 60");

  // Fixed detections: the selected set only grows as the threshold decays.
  Rng rng(5);
  std::vector<Candidate> cands;
  for (int i = 0; i < 1000; ++i) {
    Candidate k;
    k.det_orig = {{0, 0, 0, 1, 1, 1, 0}, kAllClasses[rng.index(3)], rng.uniform()};
    k.cls_loss = rng.uniform(0, 2);
    k.cons_loss = rng.uniform(0, 1);
    k.density = static_cast<std::size_t>(rng.uniform_int(0, 150));
    cands.push_back(k);
  }
  cs.d0 = PerClass<double>(120, 80, 90);
  cs.d_min = PerClass<double>(5, 5, 5);
  Thresholds th;
  th.cls = PerClass<double>::filled(1.0);
  th.cons = PerClass<double>::filled(0.5);
  std::set<std::size_t> previous;
  bool superset = true;
  for (int t = 0; t <= 10; ++t) {
    cs.t = t;
    for (ClassId cl : kAllClasses) th.density[cl] = density_lambda(cs, cl);
    std::set<std::size_t> now;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      if (is_selected(cands[i], th)) now.insert(i);
    }
    superset = superset && std::includes(now.begin(), now.end(), previous.begin(), previous.end());
    previous = std::move(now);
  }
  c.detail << " final selected=" << previous.size();
  c.require(superset, "selected set grows across rounds");
}

// Exhaustive oracle over every interior bin edge.
double scan_breakpoint(const std::vector<double>& v, int bins) {
  const double lo = *std::min_element(v.begin(), v.end()), hi = *std::max_element(v.begin(), v.end());
  const double w = (hi - lo) / bins;
  auto in_bin = [&](double x, int b) {
    const double a = lo + b * w, z = lo + (b + 1) * w;
    return b == bins - 1 ? x >= a : (x >= a && x < z);
  };
  long best = 0;
  double edge = std::nan("");
  for (int k = 1; k < bins; ++k) {
    const long left = std::count_if(v.begin(), v.end(), [&](double x) { return in_bin(x, k - 1); });
    const long right = std::count_if(v.begin(), v.end(), [&](double x) { return in_bin(x, k); });
    if (left - right > best) best = left - right, edge = lo + k * w;
  }
  return edge;
}

void histogram(Check& c) {
  std::vector<double> bimodal(30, 0.05);
  bimodal.insert(bimodal.end(), 5, 0.95);
  const double edge = histogram_breakpoint(bimodal, 10);
  c.detail << " bimodal edge=" << edge;
  c.require(std::abs(edge - 0.14) <= 1e-12, "bimodal inter-mode edge 0.14");

  std::vector<double> few = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  c.require(std::abs(histogram_breakpoint(few, 20) - 7.3) <= 1e-12, "small sample takes the 70th percentile");
  c.require(histogram_breakpoint(std::vector<double>(40, 0.25), 20) == 0.25, "constant sample takes its value");
  std::vector<double> rising;
  for (int b = 0; b < 4; ++b) {
    for (int k = 0; k <= b; ++k) rising.push_back(b + 0.5);
  }
  for (int k = 0; k < 20; ++k) rising.push_back(3.5);
  std::vector<double> sorted = rising;
  std::sort(sorted.begin(), sorted.end());
  const double pos = 0.7 * static_cast<double>(sorted.size() - 1);
  const auto i = static_cast<std::size_t>(pos);
  const double p70 = sorted[i] + (pos - static_cast<double>(i)) * (sorted[i + 1] - sorted[i]);
  c.require(std::abs(histogram_breakpoint(rising, 4) - p70) <= 1e-12, "non-descending counts take the 70th percentile");

  Rng rng(99);
  int checked = 0, bad = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const int bins = rng.uniform_int(2, 25);
    const int n = rng.uniform_int(20, 300);
    std::vector<double> v;
    const double split = rng.uniform(0.1, 0.9);
    for (int k = 0; k < n; ++k) {
      v.push_back(rng.bernoulli(0.7) ? rng.uniform(0.0, split) * rng.uniform() : rng.uniform(split, 1.0));
    }
    const double expected = scan_breakpoint(v, bins);
    if (std::isnan(expected)) continue;
    ++checked;
    const double th = histogram_breakpoint(v, bins);
    const double lo = *std::min_element(v.begin(), v.end()), hi = *std::max_element(v.begin(), v.end());
    const double w = (hi - lo) / bins;
    const long below = std::count_if(v.begin(), v.end(), [&](double x) { return x < th; });
    const long left = std::count_if(v.begin(), v.end(), [&](double x) {
      return std::min(static_cast<int>((x - lo) / w), bins - 1) < std::lround((th - lo) / w);
    });
    bad += std::abs(th - expected) > 1e-12 || below != left;
  }
  c.detail << " scanned=" << checked << " mismatches=" << bad;
  c.require(checked > 400 && bad == 0, "exhaustive edge scan agrees");
}

void background(Check& c) {
  const auto t0 = Clock::now();
  RunConfig cfg;
  cfg.seed = 1;
  const PreparedData data = prepare_data(cfg);
  DetectorParams teacher = make_oracle_params(cfg.oracle);
  for (int k = 0; k < cfg.pretrain_steps; ++k) {
    teacher = train_student(teacher, data.train, cfg.gamma, LatentAccess::oracle(), cfg.train_rule);
  }
  const DetectFn fn = [&](const Scene& s, const InferOptions& o, std::uint64_t seed) {
    return infer(teacher, s, o, seed, LatentAccess::oracle());
  };
  const InstanceBank bank = bank_init(data.train);
  auto recall = [&](BackgroundConfig bg) {
    std::vector<RemovalCounts> counts(data.train.size());
    parallel_for(data.train.size(), 1, [&](std::size_t i) {
      const Scene& s = data.train[i];
      const BrokenScene broken = mine_background(fn, s, bank.entries(s.id), bg, mix_seed(cfg.seed, 7, i));
      counts[i] = background_removal_counts(broken, s, LatentAccess::evaluator());
    });
    RemovalCounts total;
    for (const auto& rc : counts) total += rc;
    return total.recall().value_or(0.0);
  };
  BackgroundConfig low;
  low.tau_low = 0.01;
  low.nms = false;
  BackgroundConfig high;
  high.tau_low = 0.3;
  high.nms = true;
  const double r_low = recall(low), r_high = recall(high);
  const double secs = seconds_since(t0);
  c.detail << " recall(0.01,no nms)=" << r_low << " recall(0.3,nms)=" << r_high;
  c.require(r_low >= 0.95, "low-threshold recall >= 0.95");
  c.require(r_low >= r_high, "low-threshold recall >= standard recall");
  c.require(secs < 30.0, "runtime < 30 s");
}

RunConfig closed_loop_config() {
  RunConfig cfg;
  cfg.seed = 1;
  cfg.workers = 1;
  cfg.total_rounds = 5;
  cfg.dataset.synth.num_scenes = 300;
  cfg.dataset.synth.objects_min = 4;
  cfg.dataset.synth.objects_max = 8;
  cfg.dataset.keep_n = 1;
  return cfg;
}

std::string closed_loop_jsonl;

void closed_loop(Check& c) {
  const auto t0 = Clock::now();
  const RunResult res = run(closed_loop_config());
  const double secs = seconds_since(t0);
  closed_loop_jsonl = round_logs_to_jsonl(res.logs);
  RunConfig base_cfg = closed_loop_config();
  base_cfg.mining = false;
  const RunResult base = run(base_cfg);

  const RoundLog& last = res.logs.back();
  const MiningQuality& q = last.report.mining->overall;
  const double map = last.report.map_moderate.value_or(0.0);
  const double base_map = base.logs.back().report.map_moderate.value_or(0.0);
  int growing = 0;
  for (std::size_t t = 1; t < res.logs.size(); ++t) growing += res.logs[t].bank_pseudo > res.logs[t - 1].bank_pseudo;
  c.detail << " coverage=" << q.coverage << " precision=" << q.precision.value_or(0.0) << " mAP=" << map
           << " baseline=" << base_map << " round1 inserted=" << res.logs[0].inserted << " run=" << secs << "s";
  c.require(res.logs.size() == 5, "five rounds");
  c.require(q.coverage >= 0.60, "coverage >= 0.60");
  c.require(q.precision.value_or(0.0) >= 0.85, "pseudo precision >= 0.85");
  c.require(map - base_map >= 10.0, "mAP gain over baseline >= 10");
  c.require(res.logs[0].inserted == 0 && res.logs[0].bank_pseudo == 0, "round 1 inserts nothing");
  c.require(growing >= 3, "bank grows in >= 3 of rounds 2-5");
  c.require(secs < 120.0, "runtime < 2 min single-threaded");
}

void streaming(Check& c) {
  RunConfig cfg;
  cfg.seed = 1;
  cfg.streaming = StreamingConfig{};
  const RunResult res = run_streaming(cfg);
  std::size_t max_memory = 0;
  std::vector<double> checkpoints;
  for (std::size_t i = 0; i < res.logs.size(); ++i) {
    max_memory = std::max(max_memory, res.logs[i].memory_scenes);
    const bool last_of_batch = i + 1 == res.logs.size() || res.logs[i + 1].batch != res.logs[i].batch;
    if (last_of_batch) checkpoints.push_back(res.logs[i].report.map_moderate.value_or(0.0));
  }
  int up = 0;
  for (std::size_t i = 1; i < checkpoints.size(); ++i) up += checkpoints[i] >= checkpoints[i - 1];
  const int pairs = static_cast<int>(checkpoints.size()) - 1;
  c.detail << " max memory=" << max_memory << " non-decreasing " << up << "/" << pairs << " checkpoints:";
  for (double m : checkpoints) c.detail << " " << m;
  c.require(max_memory <= 100 && res.memory.size() <= 100, "memory <= 100 scenes");
  c.require(pairs >= 1 && up >= 0.7 * pairs, ">= 70% checkpoints non-decreasing");
}

void sparsify_perturb(Check& c) {
  SynthConfig sc;
  sc.num_scenes = 200;
  sc.objects_min = 3;
  sc.objects_max = 7;
  const auto full = synthesize_dataset(sc, 9);
  Rng rng(10);
  const auto sparse = sparsify(full, SparsifyStrategy::Random, 1, rng);
  std::size_t instances = 0, kept = 0;
  bool one_each = true;
  for (const Scene& s : sparse) {
    instances += s.latent_gt(LatentAccess::evaluator()).size();
    kept += s.annotations.size();
    one_each = one_each && s.annotations.size() == 1;
  }
  const double share = static_cast<double>(kept) / static_cast<double>(instances);
  c.require(one_each, "exactly one annotation per scene");
  c.require(std::abs(share - 0.2) <= 0.03, "about 20% of instances kept");

  std::vector<Scene> multi = sparsify(full, SparsifyStrategy::Random, 3, rng);
  const auto noisy = perturb_annotations(multi, 0.5, 0.45, 0.55, rng);
  std::size_t changed = 0, human = 0;
  double lo = 1, hi = 0;
  for (std::size_t s = 0; s < multi.size(); ++s) {
    for (std::size_t a = 0; a < multi[s].annotations.size(); ++a) {
      ++human;
      const Box3D& before = multi[s].annotations[a].box;
      const Box3D& after = noisy[s].annotations[a].box;
      if (before == after) continue;
      ++changed;
      const double iou = iou_3d(before, after);
      lo = std::min(lo, iou);
      hi = std::max(hi, iou);
    }
  }
  c.detail << " kept share=" << share << " perturbed " << changed << "/" << human << " IoU range [" << lo << ", "
           << hi << "]";
  c.require(changed == static_cast<std::size_t>(std::llround(0.5 * static_cast<double>(human))), "ratio honored");
  c.require(lo >= 0.45 && hi <= 0.55, "perturbed IoU3D within [0.45, 0.55]");
}

void determinism(Check& c) {
  const std::string again = round_logs_to_jsonl(run(closed_loop_config()).logs);
  RunConfig threaded = closed_loop_config();
  threaded.workers = 4;
  const std::string parallel = round_logs_to_jsonl(run(threaded).logs);
  c.detail << " log bytes=" << again.size();
  c.require(!closed_loop_jsonl.empty() && again == closed_loop_jsonl, "repeat run byte-identical");
  c.require(parallel == again, "4 workers byte-identical to 1");
}

}  // namespace

int main() {
  report(1, "geometry oracle equivalence", geometry);
  report(2, "AP oracle equivalence", average_precision);
  report(3, "EMA exactness", ema);
  report(4, "density curriculum", curriculum);
  report(5, "histogram breakpoint", histogram);
  report(6, "background mining", background);
  report(7, "closed-loop simulation", closed_loop);
  report(8, "streaming", streaming);
  report(9, "sparsify and perturb", sparsify_perturb);
  report(10, "determinism", determinism);
  std::printf("%s: %d failing\n", failures == 0 ? "ALL PASS" : "FAILURES", failures);
  return failures == 0 ? 0 : 1;
}
