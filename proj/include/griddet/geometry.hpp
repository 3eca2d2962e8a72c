#pragma once

#include <array>
#include <optional>
#include <span>
#include <vector>

namespace griddet {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

// Oriented box: (x, y, z) is the geometric center, l runs along the heading
// direction, w across it, h vertically.
struct Box3D {
  Vec3 center;
  double l = 1.0;
  double w = 1.0;
  double h = 1.0;
  double yaw = 0.0;
  std::optional<Vec2> velocity;

  double bev_area() const { return l * w; }
  double volume() const { return l * w * h; }
  double z_min() const { return center.z - 0.5 * h; }
  double z_max() const { return center.z + 0.5 * h; }
};

// Maps any angle into (-pi, pi].
double wrap_angle(double a);

void validate_box(const Box3D& box);

// Counterclockwise corners: front-left, rear-left, rear-right, front-right
// rotated by yaw, i.e. (+l/2,+w/2), (-l/2,+w/2), (-l/2,-w/2), (+l/2,-w/2).
std::array<Vec2, 4> bev_corners(const Box3D& box);

double polygon_area(std::span<const Vec2> poly);

// Sutherland-Hodgman clip of a polygon against a convex counterclockwise
// clip polygon.
std::vector<Vec2> clip_convex(std::span<const Vec2> subject, std::span<const Vec2> clip);

struct OverlapResult {
  double iou = 0.0;
  double intersection = 0.0;
  // True when either box has near-zero area; iou is then 0.
  bool degenerate = false;
};

OverlapResult overlap_bev(const Box3D& a, const Box3D& b);
OverlapResult overlap_3d(const Box3D& a, const Box3D& b);

inline double iou_bev(const Box3D& a, const Box3D& b) { return overlap_bev(a, b).iou; }
inline double iou_3d(const Box3D& a, const Box3D& b) { return overlap_3d(a, b).iou; }

// Containment in the box frame, with tolerance on each face.
bool box_contains(const Box3D& box, const Vec3& p, double tol = 1e-6);

// Global scene transforms shared by augmentation and tests.
struct Transform {
  enum class Kind { kFlipX, kFlipY, kRotate, kScale, kTranslate };
  Kind kind = Kind::kTranslate;
  double value = 0.0;   // angle for rotate, factor for scale
  Vec3 offset;          // translate only

  static Transform flip_x() { return {Kind::kFlipX, 0.0, {}}; }
  static Transform flip_y() { return {Kind::kFlipY, 0.0, {}}; }
  static Transform rotate(double theta) { return {Kind::kRotate, theta, {}}; }
  static Transform scale(double s) { return {Kind::kScale, s, {}}; }
  static Transform translate(Vec3 t) { return {Kind::kTranslate, 0.0, t}; }
};

Vec3 transform_point(const Vec3& p, const Transform& t);
Box3D transform_box(const Box3D& b, const Transform& t);

}  // namespace griddet
