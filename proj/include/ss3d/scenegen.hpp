// SPDX-License-Identifier: Apache-2.0
//
// Confident fully-annotated scene generation: paste bank objects from other
// scenes into a broken scene at their stored poses, skipping collisions.
#pragma once

#include <unordered_map>
#include <vector>

#include "ss3d/background.hpp"
#include "ss3d/bank.hpp"

namespace ss3d {

inline PerClass<int> default_placement_targets() { return {15, 10, 10}; }

/// Flat per-class view of every bank entry, built once and shared by all
/// scenes of a generation step.
class BankPool {
 public:
  explicit BankPool(const InstanceBank& bank) : bank_(&bank) {
    for (const std::string& id : bank.scene_ids()) {
      const auto& entries = bank.entries(id);
      for (const BankEntry& e : entries) by_class_[e.class_id].push_back(&e);
    }
  }
  const std::vector<const BankEntry*>& of(ClassId c) const { return by_class_[c]; }
  const InstanceBank& bank() const { return *bank_; }

 private:
  const InstanceBank* bank_;
  PerClass<std::vector<const BankEntry*>> by_class_;
};

/// Latent objects per source scene, so a pasted sample can carry its truth
/// into a generated scene (simulation only).
using LatentIndex = std::unordered_map<std::string, std::vector<LatentObject>>;

inline LatentIndex build_latent_index(const std::vector<Scene>& scenes) {
  LatentIndex idx;
  const auto token = LatentAccess::data_tools();
  for (const Scene& s : scenes) {
    if (s.has_latent()) idx[s.id] = s.latent_gt(token);
  }
  return idx;
}

inline Scene generate_confident_scene(const BrokenScene& broken, const BankPool& pool, const PerClass<int>& targets,
                                      Rng& rng, const LatentIndex* latent_index = nullptr) {
  Scene out = broken.scene;
  std::vector<Box3D> boxes;
  boxes.reserve(out.annotations.size());
  for (const Annotation& a : out.annotations) boxes.push_back(a.box);

  std::vector<const BankEntry*> placed;
  for (ClassId c : kAllClasses) {
    const int have = static_cast<int>(std::count_if(out.annotations.begin(), out.annotations.end(),
                                                    [&](const Annotation& a) { return a.class_id == c; }));
    int need = targets[c] - have;
    if (need <= 0) continue;
    std::vector<const BankEntry*> order;
    for (const BankEntry* e : pool.of(c)) {
      if (e->scene_id != out.id) order.push_back(e);
    }
    rng.shuffle(order);
    for (const BankEntry* e : order) {
      if (need == 0) break;
      const bool collides = std::any_of(boxes.begin(), boxes.end(),
                                        [&](const Box3D& b) { return bev_intersection_area(b, e->box) > 0.0; });
      if (collides) continue;
      std::vector<bool> inside(out.points.size(), false);
      for (std::size_t i : points_in_box(out.points, e->box)) inside[i] = true;
      PointSet kept;
      kept.reserve(out.points.size() + e->points_local.size());
      for (std::size_t i = 0; i < out.points.size(); ++i) {
        if (!inside[i]) kept.push_back(out.points[i]);
      }
      for (const Point& p : e->world_points()) kept.push_back(p);
      out.points = std::move(kept);
      out.annotations.push_back(e->annotation());
      boxes.push_back(e->box);
      placed.push_back(e);
      --need;
    }
  }

  if (latent_index && out.has_latent() && !placed.empty()) {
    const auto token = LatentAccess::data_tools();
    auto latent = out.latent_gt(token);
    for (const BankEntry* e : placed) {
      auto it = latent_index->find(e->scene_id);
      if (it == latent_index->end()) continue;
      for (const LatentObject& o : it->second) {
        if (bev_intersection_area(o.annotation.box, e->box) > 0.0) latent.push_back(o);
      }
    }
    out.set_latent(std::move(latent), token);
  }
  return out;
}

inline Scene generate_confident_scene(const BrokenScene& broken, const InstanceBank& bank, const PerClass<int>& targets,
                                      Rng& rng) {
  return generate_confident_scene(broken, BankPool(bank), targets, rng);
}

}  // namespace ss3d
