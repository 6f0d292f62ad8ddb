#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coopdet/scene.hpp"
#include "coopdet/tensor.hpp"

namespace coopdet {

// Observation rasterization parameters. The raster covers the square
// [-extent, extent]^2 in the agent's local (heading-rotated) frame; the
// sensing radius is deliberately smaller than the window diagonal so that a
// single agent never sees its whole window and fusion has something to add.
struct RenderConfig {
  int raster_n = 32;          // H_in = W_in
  double extent = 24.0;       // half-width of the local window, units
  double sensing_radius = 20.0;
  double dropout = 0.3;       // per-object pixel dropout probability
  double noise = 0.05;        // additive uniform noise amplitude on visible cells

  bool operator==(const RenderConfig&) const = default;
};

// Channel 0: occupancy. Channel 1: class pattern, intensity (c+1)/k.
inline constexpr int kObsChannels = 2;

inline double class_pattern_value(int class_id) {
  return static_cast<double>(class_id + 1) / kNumClasses;
}

struct ObservationRaster {
  Tensor grid;                       // (2, raster_n, raster_n)
  std::vector<std::uint8_t> visibility;  // raster_n * raster_n, 1 = sensed
  AgentPose agent_pose;
  int frame_id = 0;
};

// The world-frame value an ideal noise-free sensor would record at a point:
// (occupancy, pattern). Shared by the renderer and the rasterization oracle.
inline std::pair<double, double> world_sample(const WorldScene& scene,
                                              const Vec2& w) {
  for (const auto& obj : scene.objects)
    if (obj.box.contains(w)) return {1.0, class_pattern_value(obj.class_id)};
  return {0.0, 0.0};
}

// Renders the agent's partial view of the scene. Only objects whose center
// lies within the sensing radius appear; cells beyond the radius are zeroed
// and masked invisible. Dropout and noise are deterministic in `seed`.
inline ObservationRaster render_observation(const WorldScene& scene,
                                            const AgentPose& pose,
                                            const RenderConfig& cfg,
                                            std::uint64_t seed) {
  check_arg(pose.position.x >= 0.0 && pose.position.x <= scene.arena_size &&
                pose.position.y >= 0.0 && pose.position.y <= scene.arena_size,
            "render_observation: pose outside arena");
  const int n = cfg.raster_n;
  const GridSpec grid{n, cfg.extent};
  ObservationRaster obs;
  obs.grid = Tensor({kObsChannels, n, n});
  obs.visibility.assign(static_cast<std::size_t>(n) * n, 0);
  obs.agent_pose = pose;

  // Objects in range of this sensor.
  std::vector<const GroundTruthBox*> in_range;
  for (const auto& obj : scene.objects)
    if ((Vec2{obj.box.cx, obj.box.cy} - pose.position).norm() <=
        cfg.sensing_radius)
      in_range.push_back(&obj);

  // Per-object RNG streams keep dropout independent of object order.
  Rng noise_rng(mix64(seed, 0x0b5e55ULL));

  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const Vec2 local = grid.center(r, c);
      const Vec2 world = pose.local_to_world(local);
      const bool sensed = (world - pose.position).norm() <= cfg.sensing_radius;
      if (!sensed) continue;
      obs.visibility[static_cast<std::size_t>(r) * n + c] = 1;
      double occ = 0.0, pat = 0.0;
      for (std::size_t oi = 0; oi < in_range.size(); ++oi) {
        if (!in_range[oi]->box.contains(world)) continue;
        if (cfg.dropout > 0.0) {
          // Stateless per-(object, cell) dropout decision.
          const std::uint64_t h = mix64(seed, 0xd20ca7ULL + oi,
                                        static_cast<std::uint64_t>(r) * n + c);
          if (static_cast<double>(h >> 11) * 0x1.0p-53 < cfg.dropout) continue;
        }
        occ = 1.0;
        pat = class_pattern_value(in_range[oi]->class_id);
        break;
      }
      obs.grid.at(0, r, c) = occ;
      obs.grid.at(1, r, c) = pat;
    }
  }
  if (cfg.noise > 0.0) {
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) {
        if (!obs.visibility[static_cast<std::size_t>(r) * n + c]) continue;
        obs.grid.at(0, r, c) += noise_rng.uniform(-cfg.noise, cfg.noise);
        obs.grid.at(1, r, c) += noise_rng.uniform(-cfg.noise, cfg.noise);
      }
  }
  return obs;
}

// --------------------------------------------------------------------------
// Temporal sequences
// --------------------------------------------------------------------------

struct SequenceFrame {
  int frame_id = 0;
  std::vector<AgentPose> poses;
  std::vector<ObservationRaster> observations;
};

struct SequenceLog {
  WorldScene scene;
  std::vector<SequenceFrame> frames;
  std::vector<int> agent_ids;
  int attacker_id = 1;
  std::vector<std::string> clamp_events;
};

inline constexpr int kDefaultSequenceFrames = 10;

// Integrates agent velocities over n_frames and re-renders each view.
// Object world positions stay fixed; an agent hitting the arena wall is
// clamped and its velocity zeroed (logged in clamp_events).
inline SequenceLog advance_sequence(const WorldScene& scene,
                                    const std::vector<AgentPose>& start_poses,
                                    int n_frames, std::uint64_t seed,
                                    const RenderConfig& cfg = {}) {
  check_arg(n_frames >= 2, "advance_sequence: need at least 2 frames");
  for (const auto& p : start_poses)
    check_arg(std::fabs(p.velocity.x) <= 2.0 && std::fabs(p.velocity.y) <= 2.0,
              "advance_sequence: velocities bounded by 2 units/frame");
  SequenceLog log;
  log.scene = scene;
  for (std::size_t i = 0; i < start_poses.size(); ++i)
    log.agent_ids.push_back(static_cast<int>(i));

  std::vector<AgentPose> poses = start_poses;
  for (int t = 0; t < n_frames; ++t) {
    if (t > 0) {
      for (std::size_t i = 0; i < poses.size(); ++i) {
        auto& p = poses[i];
        p.position.x += p.velocity.x;
        p.position.y += p.velocity.y;
        const double lo = 0.0, hi = scene.arena_size;
        if (p.position.x < lo || p.position.x > hi || p.position.y < lo ||
            p.position.y > hi) {
          p.position.x = std::clamp(p.position.x, lo, hi);
          p.position.y = std::clamp(p.position.y, lo, hi);
          p.velocity = {0.0, 0.0};
          log.clamp_events.push_back("frame " + std::to_string(t) + ": agent " +
                                     std::to_string(i) +
                                     " clamped at arena boundary");
        }
      }
    }
    SequenceFrame frame;
    frame.frame_id = t;
    frame.poses = poses;
    for (std::size_t i = 0; i < poses.size(); ++i) {
      auto obs = render_observation(
          scene, poses[i], cfg,
          mix64(seed, static_cast<std::uint64_t>(t), i));
      obs.frame_id = t;
      frame.observations.push_back(std::move(obs));
    }
    log.frames.push_back(std::move(frame));
  }
  return log;
}

// Rigid transform taking points in the agent's local frame at time t to its
// local frame at time t+1 (the egomotion compensation map).
inline FrameTransform egomotion_transform(const AgentPose& at_t,
                                          const AgentPose& at_t1) {
  return src_from_dst(at_t, at_t1).inverse();
}

}  // namespace coopdet
