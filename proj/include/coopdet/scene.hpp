#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "coopdet/geometry.hpp"
#include "coopdet/rng.hpp"

namespace coopdet {

inline constexpr double kArenaSize = 64.0;
inline constexpr int kNumClasses = 3;  // background index == kNumClasses

struct GroundTruthBox {
  int class_id = 0;  // in [0, kNumClasses)
  Box box;
};

struct WorldScene {
  double arena_size = kArenaSize;
  std::vector<GroundTruthBox> objects;
  std::int64_t scene_id = 0;
  std::uint64_t rng_seed = 0;
};

// Scene generation parameters. Classes are told apart by a size prior and by
// the pattern-channel intensity painted at render time.
struct GenConfig {
  int min_objects = 4;
  int max_objects = 8;
  // Per-class (lo, hi) uniform range for each side length, in arena units.
  std::array<std::array<double, 2>, kNumClasses> size_range = {
      {{3.0, 5.0}, {4.5, 7.0}, {6.0, 9.0}}};
  int max_attempts = 1000;

  bool operator==(const GenConfig&) const = default;
};

// Places non-overlapping axis-aligned boxes by rejection sampling.
// Deterministic in `seed`.
inline WorldScene generate_scene(std::uint64_t seed, const GenConfig& cfg = {}) {
  check_arg(cfg.min_objects >= 4 && cfg.max_objects <= 8 &&
                cfg.min_objects <= cfg.max_objects,
            "generate_scene: object count range must lie within [4, 8]");
  for (const auto& r : cfg.size_range)
    check_arg(r[0] > 0.0 && r[1] >= r[0], "generate_scene: sizes must be positive");

  Rng rng(mix64(seed, 0x5ce9e5ULL));
  WorldScene scene;
  scene.rng_seed = seed;
  const int count =
      static_cast<int>(rng.uniform_int(cfg.min_objects, cfg.max_objects));
  int attempts = 0;
  while (static_cast<int>(scene.objects.size()) < count) {
    if (++attempts > cfg.max_attempts)
      throw GenerationError(
          "generate_scene: placement failed after " +
          std::to_string(cfg.max_attempts) +
          " attempts; configuration is overcrowded");
    GroundTruthBox obj;
    obj.class_id = static_cast<int>(rng.uniform_int(0, kNumClasses - 1));
    const auto& sr = cfg.size_range[static_cast<std::size_t>(obj.class_id)];
    obj.box.w = rng.uniform(sr[0], sr[1]);
    obj.box.h = rng.uniform(sr[0], sr[1]);
    obj.box.cx = rng.uniform(0.5 * obj.box.w, kArenaSize - 0.5 * obj.box.w);
    obj.box.cy = rng.uniform(0.5 * obj.box.h, kArenaSize - 0.5 * obj.box.h);
    bool collides = false;
    for (const auto& other : scene.objects)
      if (iou(obj.box, other.box) > 0.0) {
        collides = true;
        break;
      }
    if (!collides) scene.objects.push_back(obj);
  }
  return scene;
}

inline constexpr double kMinAgentSpacing = 4.0;
inline constexpr double kAgentArenaMargin = 2.0;

// Samples agent poses near a shared rally point so that views overlap.
// Poses are strictly inside the arena, pairwise at least 4 units apart, and
// deterministic in `seed`. The rejection radius widens if placement stalls.
inline std::vector<AgentPose> sample_agent_poses(const WorldScene& scene,
                                                 int n_agents,
                                                 std::uint64_t seed) {
  check_arg(n_agents >= 2 && n_agents <= 7,
            "sample_agent_poses: n_agents must be in [2, 7]");
  (void)scene;  // poses are independent of object layout
  Rng rng(mix64(seed, 0xa9e27bULL));
  const double lo = kAgentArenaMargin, hi = kArenaSize - kAgentArenaMargin;
  const Vec2 rally{rng.uniform(20.0, kArenaSize - 20.0),
                   rng.uniform(20.0, kArenaSize - 20.0)};
  std::vector<AgentPose> poses;
  int attempts = 0;
  while (static_cast<int>(poses.size()) < n_agents) {
    ++attempts;
    const double radius = 10.0 + 2.0 * (attempts / 64);
    const double a = rng.uniform(0.0, 2.0 * kPi);
    const double r = radius * std::sqrt(rng.uniform());
    AgentPose pose;
    pose.position = {std::clamp(rally.x + r * std::cos(a), lo, hi),
                     std::clamp(rally.y + r * std::sin(a), lo, hi)};
    pose.heading = wrap_angle(rng.uniform(-kPi, kPi));
    bool ok = true;
    for (const auto& other : poses)
      if ((pose.position - other.position).norm() < kMinAgentSpacing) {
        ok = false;
        break;
      }
    if (ok) poses.push_back(pose);
  }
  return poses;
}

// Assigns per-agent velocities for temporal sequences (static by default).
inline void assign_velocities(std::vector<AgentPose>& poses, std::uint64_t seed,
                              double max_speed = 1.5) {
  check_arg(max_speed <= 2.0, "assign_velocities: speed bound is 2 units/frame");
  Rng rng(mix64(seed, 0x7e10c17ULL));
  for (auto& p : poses)
    p.velocity = {rng.uniform(-max_speed, max_speed),
                  rng.uniform(-max_speed, max_speed)};
}

}  // namespace coopdet
