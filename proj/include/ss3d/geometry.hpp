// SPDX-License-Identifier: Apache-2.0
//
// Oriented boxes in the LiDAR frame (x forward, y left, z up), rotated BEV and
// 3D overlap, point containment, and the global augmentation group.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

#include "ss3d/core.hpp"

namespace ss3d {

inline constexpr double kPi = std::numbers::pi;

/// Wraps an angle into (-pi, pi].
inline double normalize_angle(double a) {
  a = std::remainder(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  return a;
}

struct Point {
  double x = 0, y = 0, z = 0;
  double intensity = 0;
  bool operator==(const Point&) const = default;
};

using PointSet = std::vector<Point>;

struct Box3D {
  double x = 0, y = 0, z = 0;  // geometric center
  double l = 1, w = 1, h = 1;  // extent along heading, across heading, vertical
  double yaw = 0;

  double volume() const { return l * w * h; }
  double bev_area() const { return l * w; }
  double range() const { return std::hypot(x, y); }
  bool valid() const {
    return l > 0 && w > 0 && h > 0 && std::isfinite(x) && std::isfinite(y) && std::isfinite(z) &&
           std::isfinite(yaw);
  }
  bool operator==(const Box3D&) const = default;
};

struct Vec2 {
  double x = 0, y = 0;
};

namespace detail {

inline double cross(const Vec2& o, const Vec2& a, const Vec2& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

inline double polygon_area(std::span<const Vec2> poly) {
  if (poly.size() < 3) return 0.0;
  double twice = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2& a = poly[i];
    const Vec2& b = poly[(i + 1) % poly.size()];
    twice += a.x * b.y - b.x * a.y;
  }
  return 0.5 * std::abs(twice);
}

inline Vec2 segment_line_intersection(const Vec2& p, const Vec2& q, const Vec2& a, const Vec2& b) {
  const double dp = cross(a, b, p);
  const double dq = cross(a, b, q);
  const double t = dp / (dp - dq);
  return {p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)};
}

}  // namespace detail

/// BEV corners in counter-clockwise order.
inline std::array<Vec2, 4> bev_corners(const Box3D& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double hl = 0.5 * b.l, hw = 0.5 * b.w;
  const std::array<Vec2, 4> local = {Vec2{hl, hw}, Vec2{-hl, hw}, Vec2{-hl, -hw}, Vec2{hl, -hw}};
  std::array<Vec2, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) {
    out[i] = {b.x + c * local[i].x - s * local[i].y, b.y + s * local[i].x + c * local[i].y};
  }
  return out;
}

/// Sutherland-Hodgman clip of two convex CCW quadrilaterals; returns the
/// intersection area.
inline double bev_intersection_area(const Box3D& a, const Box3D& b) {
  const double reach = 0.5 * (std::hypot(a.l, a.w) + std::hypot(b.l, b.w));
  if (std::hypot(a.x - b.x, a.y - b.y) > reach) return 0.0;

  const auto subject = bev_corners(a);
  const auto clip = bev_corners(b);
  constexpr double kEdgeTol = 1e-12;

  std::vector<Vec2> poly(subject.begin(), subject.end());
  std::vector<Vec2> next;
  for (std::size_t e = 0; e < 4 && !poly.empty(); ++e) {
    const Vec2& c0 = clip[e];
    const Vec2& c1 = clip[(e + 1) % 4];
    next.clear();
    for (std::size_t i = 0; i < poly.size(); ++i) {
      const Vec2& cur = poly[i];
      const Vec2& prev = poly[(i + poly.size() - 1) % poly.size()];
      const bool cur_in = detail::cross(c0, c1, cur) >= -kEdgeTol;
      const bool prev_in = detail::cross(c0, c1, prev) >= -kEdgeTol;
      if (cur_in) {
        if (!prev_in) next.push_back(detail::segment_line_intersection(prev, cur, c0, c1));
        next.push_back(cur);
      } else if (prev_in) {
        next.push_back(detail::segment_line_intersection(prev, cur, c0, c1));
      }
    }
    poly.swap(next);
  }
  const double area = detail::polygon_area(poly);
  return area < 1e-12 ? 0.0 : area;
}

inline double rotated_bev_iou(const Box3D& a, const Box3D& b) {
  if (a == b) return 1.0;
  const double inter = bev_intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  const double uni = a.bev_area() + b.bev_area() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

inline double vertical_overlap(const Box3D& a, const Box3D& b) {
  const double lo = std::max(a.z - 0.5 * a.h, b.z - 0.5 * b.h);
  const double hi = std::min(a.z + 0.5 * a.h, b.z + 0.5 * b.h);
  return std::max(0.0, hi - lo);
}

inline double iou_3d(const Box3D& a, const Box3D& b) {
  if (a == b) return 1.0;
  const double dz = vertical_overlap(a, b);
  if (dz <= 0.0) return 0.0;
  const double inter = bev_intersection_area(a, b) * dz;
  if (inter <= 0.0) return 0.0;
  const double uni = a.volume() + b.volume() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

/// Point expressed in the box frame (u along heading, v across, t vertical).
inline Point to_box_frame(const Point& p, const Box3D& box) {
  const double dx = p.x - box.x, dy = p.y - box.y;
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  return {dx * c + dy * s, -dx * s + dy * c, p.z - box.z, p.intensity};
}

inline Point from_box_frame(const Point& local, const Box3D& box) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  return {box.x + local.x * c - local.y * s, box.y + local.x * s + local.y * c, box.z + local.z,
          local.intensity};
}

inline bool box_contains(const Box3D& box, const Point& p) {
  const Point q = to_box_frame(p, box);
  return std::abs(q.x) <= 0.5 * box.l && std::abs(q.y) <= 0.5 * box.w &&
         std::abs(q.z) <= 0.5 * box.h;
}

/// Indices of points inside the box, boundary inclusive.
inline std::vector<std::size_t> points_in_box(std::span<const Point> pts, const Box3D& box) {
  std::vector<std::size_t> out;
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  const double hl = 0.5 * box.l, hw = 0.5 * box.w, hh = 0.5 * box.h;
  const double reach = std::hypot(hl, hw);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double dx = pts[i].x - box.x, dy = pts[i].y - box.y;
    if (std::abs(dx) > reach || std::abs(dy) > reach) continue;
    const double u = dx * c + dy * s;
    const double v = -dx * s + dy * c;
    const double t = pts[i].z - box.z;
    if (std::abs(u) <= hl && std::abs(v) <= hw && std::abs(t) <= hh) out.push_back(i);
  }
  return out;
}

inline std::size_t count_points_in_box(std::span<const Point> pts, const Box3D& box) {
  return points_in_box(pts, box).size();
}

inline Box3D enlarge(const Box3D& b, double margin) {
  Box3D out = b;
  out.l += 2.0 * margin;
  out.w += 2.0 * margin;
  out.h += 2.0 * margin;
  return out;
}

// ---------------------------------------------------------------------------
// Global augmentation: flips, uniform scaling, rotation about z.

struct AugParams {
  bool flip_x = false;  // mirror across the X axis (y -> -y)
  bool flip_y = false;  // mirror across the Y axis (x -> -x)
  double scale = 1.0;
  double rot_z = 0.0;
  bool operator==(const AugParams&) const = default;
};

struct AugRanges {
  double flip_probability = 0.5;
  double scale_min = 0.8;
  double scale_max = 1.2;
  double rot_max = kPi / 4.0;
};

enum class AugDirection { Forward, Inverse };

inline AugParams sample_augmentation(Rng& rng, const AugRanges& ranges = {}) {
  AugParams a;
  a.flip_x = rng.bernoulli(ranges.flip_probability);
  a.flip_y = rng.bernoulli(ranges.flip_probability);
  a.scale = rng.uniform(ranges.scale_min, ranges.scale_max);
  a.rot_z = rng.uniform(-ranges.rot_max, ranges.rot_max);
  return a;
}

namespace detail {

inline void rotate_xy(double& x, double& y, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  const double nx = c * x - s * y;
  const double ny = s * x + c * y;
  x = nx;
  y = ny;
}

}  // namespace detail

inline Point apply_augmentation(Point p, const AugParams& a, AugDirection dir) {
  if (dir == AugDirection::Forward) {
    if (a.flip_x) p.y = -p.y;
    if (a.flip_y) p.x = -p.x;
    p.x *= a.scale;
    p.y *= a.scale;
    p.z *= a.scale;
    detail::rotate_xy(p.x, p.y, a.rot_z);
  } else {
    detail::rotate_xy(p.x, p.y, -a.rot_z);
    p.x /= a.scale;
    p.y /= a.scale;
    p.z /= a.scale;
    if (a.flip_y) p.x = -p.x;
    if (a.flip_x) p.y = -p.y;
  }
  return p;
}

inline Box3D apply_augmentation(Box3D b, const AugParams& a, AugDirection dir) {
  if (dir == AugDirection::Forward) {
    if (a.flip_x) {
      b.y = -b.y;
      b.yaw = normalize_angle(-b.yaw);
    }
    if (a.flip_y) {
      b.x = -b.x;
      b.yaw = normalize_angle(kPi - b.yaw);
    }
    b.x *= a.scale;
    b.y *= a.scale;
    b.z *= a.scale;
    b.l *= a.scale;
    b.w *= a.scale;
    b.h *= a.scale;
    detail::rotate_xy(b.x, b.y, a.rot_z);
    b.yaw = normalize_angle(b.yaw + a.rot_z);
  } else {
    detail::rotate_xy(b.x, b.y, -a.rot_z);
    b.yaw = normalize_angle(b.yaw - a.rot_z);
    b.x /= a.scale;
    b.y /= a.scale;
    b.z /= a.scale;
    b.l /= a.scale;
    b.w /= a.scale;
    b.h /= a.scale;
    if (a.flip_y) {
      b.x = -b.x;
      b.yaw = normalize_angle(kPi - b.yaw);
    }
    if (a.flip_x) {
      b.y = -b.y;
      b.yaw = normalize_angle(-b.yaw);
    }
  }
  return b;
}

inline PointSet apply_augmentation(const PointSet& pts, const AugParams& a, AugDirection dir) {
  PointSet out;
  out.reserve(pts.size());
  for (const Point& p : pts) out.push_back(apply_augmentation(p, a, dir));
  return out;
}

/// Smallest absolute difference between two angles.
inline double angle_distance(double a, double b) { return std::abs(normalize_angle(a - b)); }

}  // namespace ss3d
