// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace ss3d;
using namespace ss3d::test;

namespace {

const Box3D kA{10, 0, 0.75, 4, 1.8, 1.5, 0};    // human-labeled, in the bank
const Box3D kB{20, 6, 0.75, 4, 1.8, 1.5, 0.5};  // missing, predicted
const Box3D kC{30, -6, 0.85, 0.8, 0.6, 1.7, 0};  // missing, never predicted

Scene fixture() {
  Rng rng(1);
  PointSet pts = fill_box(kA, 30, rng);
  for (const Point& p : fill_box(kB, 20, rng)) pts.push_back(p);
  for (const Point& p : fill_box(kC, 10, rng)) pts.push_back(p);
  for (int i = 0; i < 40; ++i) pts.push_back({rng.uniform(0, 40), rng.uniform(-20, -12), 0.0, 0});
  Scene s = make_scene("bg", pts, {make_annotation(kA, ClassId::Car)});
  s.set_latent({{make_annotation(kA, ClassId::Car), 1}, {make_annotation(kB, ClassId::Car), 2},
                {make_annotation(kC, ClassId::Pedestrian), 3}},
               LatentAccess::data_tools());
  return s;
}

}  // namespace

TEST(BreakScene, DropsPredictedAndBankRegionsThenRefills) {
  const Scene s = fixture();
  const InstanceBank bank = bank_init({s});
  const std::vector<Detection> dets = {{kB, ClassId::Car, 0.05}};
  const BrokenScene b = break_scene(s, dets, bank.entries(s.id));
  EXPECT_EQ(b.removed_point_count, 50u);
  EXPECT_EQ(b.refilled_point_count, 30u);
  EXPECT_EQ(b.scene.points.size(), s.points.size() - 50 + 30);
  EXPECT_EQ(b.kept_original_indices.size(), s.points.size() - 50);
  for (std::size_t k = 0; k < b.kept_original_indices.size(); ++k) {
    EXPECT_EQ(b.scene.points[k], s.points[b.kept_original_indices[k]]);
  }
  EXPECT_EQ(count_points_in_box(b.scene.points, kB), 0u);
  EXPECT_EQ(count_points_in_box(b.scene.points, kC), 10u);
  ASSERT_EQ(b.scene.annotations.size(), 1u);
  EXPECT_EQ(b.scene.annotations[0].box, kA);
  EXPECT_TRUE(b.scene.has_latent());
}

TEST(BreakScene, MarginEnlargesDeletion) {
  const Scene s = fixture();
  Box3D small = kB;
  small.l = 1.0;
  small.w = 0.5;
  const std::vector<Detection> dets = {{small, ClassId::Car, 0.5}};
  const auto tight = break_scene(s, dets, {});
  const auto loose = break_scene(s, dets, {}, 1.5);
  EXPECT_LT(tight.removed_point_count, loose.removed_point_count);
  EXPECT_EQ(loose.removed_point_count, 20u);
}

TEST(BreakScene, NoOriginalPointSurvivesInsideAnyPrediction) {
  Rng rng(7);
  SynthConfig cfg;
  cfg.num_scenes = 10;
  for (const Scene& s : synthesize_dataset(cfg, 3)) {
    std::vector<Detection> dets;
    for (int k = 0; k < 6; ++k) dets.push_back({random_box(rng, 25.0), ClassId::Car, 0.1});
    for (Detection& d : dets) d.box.x += 25;
    const auto b = break_scene(s, dets, {});
    for (const Point& p : b.scene.points) {
      for (const Detection& d : dets) ASSERT_FALSE(box_contains(d.box, p));
    }
    EXPECT_EQ(b.removed_point_count + b.scene.points.size(), s.points.size());
  }
}

TEST(RemovalRecall, CountsOnlyObjectsMissingFromTheBank) {
  const Scene s = fixture();
  const InstanceBank bank = bank_init({s});
  const std::vector<Detection> dets = {{kB, ClassId::Car, 0.05}};
  const auto b = break_scene(s, dets, bank.entries(s.id));
  const RemovalCounts rc = background_removal_counts(b, s, LatentAccess::evaluator());
  EXPECT_EQ(rc.target_points, 30u);
  EXPECT_EQ(rc.removed_points, 20u);
  EXPECT_NEAR(*rc.recall(), 2.0 / 3.0, 1e-12);
  RemovalCounts sum = rc;
  sum += rc;
  EXPECT_EQ(sum.target_points, 60u);
  EXPECT_FALSE(RemovalCounts{}.recall().has_value());
  Scene plain = s;
  plain.clear_latent();
  EXPECT_THROW(background_removal_counts(b, plain, LatentAccess::evaluator()), Error);
}

TEST(MineBackground, LowThresholdWithoutNmsRemovesMore) {
  SynthConfig cfg;
  cfg.num_scenes = 40;
  Rng rng(2);
  const auto scenes = sparsify(synthesize_dataset(cfg, 5), SparsifyStrategy::Random, 1, rng);
  OracleConfig oc;
  oc.competence = PerClass<double>::filled(0.5);
  const DetectorParams p = make_oracle_params(oc);
  const DetectFn teacher = [&](const Scene& s, const InferOptions& o, std::uint64_t seed) {
    return infer(p, s, o, seed, LatentAccess::oracle());
  };
  const InstanceBank bank = bank_init(scenes);
  RemovalCounts aggressive, cautious;
  for (const Scene& s : scenes) {
    aggressive += background_removal_counts(mine_background(teacher, s, bank.entries(s.id), {.tau_low = 0.01}, 9), s,
                                            LatentAccess::evaluator());
    cautious += background_removal_counts(
        mine_background(teacher, s, bank.entries(s.id), {.tau_low = 0.3, .nms = true}, 9), s, LatentAccess::evaluator());
  }
  EXPECT_GT(*aggressive.recall(), *cautious.recall());
  EXPECT_GE(*aggressive.recall(), 0.9);
}

TEST(MineBackground, ValidatesThreshold) {
  const Scene s = fixture();
  const DetectFn none = [](const Scene&, const InferOptions&, std::uint64_t) { return std::vector<Detection>{}; };
  EXPECT_THROW(mine_background(none, s, {}, {.tau_low = 0.0}, 1), Error);
  EXPECT_THROW(mine_background(none, s, {}, {.tau_low = 1.0}, 1), Error);
  EXPECT_EQ(mine_background(none, s, {}, {}, 1).removed_point_count, 0u);
}

TEST(MineBackground, PassesThresholdAndNmsToDetector) {
  const Scene s = fixture();
  InferOptions seen;
  const DetectFn spy = [&](const Scene&, const InferOptions& o, std::uint64_t) {
    seen = o;
    return std::vector<Detection>{};
  };
  mine_background(spy, s, {}, {.tau_low = 0.02, .nms = false}, 1);
  EXPECT_DOUBLE_EQ(seen.score_threshold, 0.02);
  EXPECT_FALSE(seen.nms);
}
