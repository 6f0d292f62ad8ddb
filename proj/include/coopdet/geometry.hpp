#pragma once

#include <algorithm>
#include <cmath>

#include "coopdet/common.hpp"

namespace coopdet {

inline constexpr double kPi = 3.141592653589793238462643383279502884;

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double norm() const { return std::hypot(x, y); }
};

// Wrap an angle into [-pi, pi).
inline double wrap_angle(double a) {
  while (a >= kPi) a -= 2.0 * kPi;
  while (a < -kPi) a += 2.0 * kPi;
  return a;
}

// An agent's pose in the arena. Velocity is only meaningful inside
// temporal sequences; static scenes leave it at zero.
struct AgentPose {
  Vec2 position;
  double heading = 0.0;       // radians, in [-pi, pi)
  Vec2 velocity;              // units per frame

  // local -> world: w = p + R(heading) q
  Vec2 local_to_world(const Vec2& q) const {
    const double c = std::cos(heading), s = std::sin(heading);
    return {position.x + c * q.x - s * q.y, position.y + s * q.x + c * q.y};
  }
  // world -> local: q = R(-heading) (w - p)
  Vec2 world_to_local(const Vec2& w) const {
    const double c = std::cos(heading), s = std::sin(heading);
    const Vec2 d = w - position;
    return {c * d.x + s * d.y, -s * d.x + c * d.y};
  }
};

// Rigid map between two local frames, kept in (angle, translation) form so
// that the no-op case stays numerically exact: for src == dst the angle and
// translation are exactly zero and applying the transform is the identity.
struct FrameTransform {
  double angle = 0.0;  // rotation applied to the input point
  Vec2 t;              // then translate

  Vec2 apply(const Vec2& q) const {
    if (angle == 0.0) return {q.x + t.x, q.y + t.y};
    const double c = std::cos(angle), s = std::sin(angle);
    return {c * q.x - s * q.y + t.x, s * q.x + c * q.y + t.y};
  }

  FrameTransform inverse() const {
    const double c = std::cos(angle), s = std::sin(angle);
    return {-angle, {-(c * t.x + s * t.y), -(-s * t.x + c * t.y)}};
  }

  bool is_identity() const { return angle == 0.0 && t.x == 0.0 && t.y == 0.0; }
};

// Transform taking a point expressed in `dst`'s local frame to the same
// world point expressed in `src`'s local frame. This is the resampling map
// used by feature warping: for every destination cell we ask where to read
// in the source grid.
inline FrameTransform src_from_dst(const AgentPose& src, const AgentPose& dst) {
  FrameTransform ft;
  ft.angle = wrap_angle(dst.heading - src.heading);
  const double c = std::cos(src.heading), s = std::sin(src.heading);
  const Vec2 d = dst.position - src.position;
  ft.t = {c * d.x + s * d.y, -s * d.x + c * d.y};
  if (src.heading == dst.heading) ft.angle = 0.0;
  return ft;
}

// Axis-aligned box, center + size parameterization.
struct Box {
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;

  double x1() const { return cx - 0.5 * w; }
  double x2() const { return cx + 0.5 * w; }
  double y1() const { return cy - 0.5 * h; }
  double y2() const { return cy + 0.5 * h; }
  double area() const { return w * h; }

  bool contains(const Vec2& p) const {
    return p.x >= x1() && p.x <= x2() && p.y >= y1() && p.y <= y2();
  }
};

// Intersection over union of two axis-aligned boxes. Symmetric, in [0,1].
inline double iou(const Box& a, const Box& b) {
  const double iw =
      std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const double ih =
      std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// A square grid of n*n cells covering local coords [-extent, extent]^2.
// Row r maps to y, column c maps to x; cell centers at half-cell offsets.
struct GridSpec {
  int n = 0;
  double extent = 0.0;

  double cell() const { return 2.0 * extent / n; }
  Vec2 center(int r, int c) const {
    return {-extent + (c + 0.5) * cell(), -extent + (r + 0.5) * cell()};
  }
  // Fractional (row, col) of a local point; centers land on integers.
  Vec2 to_rc(const Vec2& q) const {
    const double s = cell();
    return {(q.y + extent) / s - 0.5, (q.x + extent) / s - 0.5};
  }
  bool inside(const Vec2& q) const {
    return q.x >= -extent && q.x <= extent && q.y >= -extent && q.y <= extent;
  }
};

}  // namespace coopdet
