#include "griddet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "griddet/error.hpp"

namespace griddet {

namespace {

constexpr double kEdgeEps = 1e-9;
constexpr double kDegenerateArea = 1e-12;

double cross(const Vec2& o, const Vec2& a, const Vec2& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

Vec2 line_intersection(const Vec2& p, const Vec2& q, const Vec2& a, const Vec2& b) {
  // Intersection of segment pq with the infinite line ab.
  const double dp = cross(a, b, p);
  const double dq = cross(a, b, q);
  const double t = dp / (dp - dq);
  return {p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)};
}

}  // namespace

double wrap_angle(double a) {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  if (a > -std::numbers::pi && a <= std::numbers::pi) return a;
  double r = std::fmod(a + std::numbers::pi, kTwoPi);
  if (r < 0) r += kTwoPi;
  r -= std::numbers::pi;
  return r <= -std::numbers::pi ? r + kTwoPi : r;
}

void validate_box(const Box3D& box) {
  if (!(box.l > 0 && box.w > 0 && box.h > 0)) {
    throw ValidationError("box dims must be strictly positive");
  }
  if (!(box.yaw > -std::numbers::pi && box.yaw <= std::numbers::pi)) {
    throw ValidationError("box yaw outside (-pi, pi]");
  }
  if (!std::isfinite(box.center.x) || !std::isfinite(box.center.y) ||
      !std::isfinite(box.center.z)) {
    throw ValidationError("box center is not finite");
  }
}

std::array<Vec2, 4> bev_corners(const Box3D& box) {
  const double c = std::cos(box.yaw);
  const double s = std::sin(box.yaw);
  const double hl = 0.5 * box.l;
  const double hw = 0.5 * box.w;
  const std::array<Vec2, 4> local{{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
  std::array<Vec2, 4> out;
  for (size_t i = 0; i < 4; ++i) {
    out[i] = {box.center.x + c * local[i].x - s * local[i].y,
              box.center.y + s * local[i].x + c * local[i].y};
  }
  return out;
}

double polygon_area(std::span<const Vec2> poly) {
  if (poly.size() < 3) return 0.0;
  double twice = 0.0;
  for (size_t i = 0; i < poly.size(); ++i) {
    const Vec2& p = poly[i];
    const Vec2& q = poly[(i + 1) % poly.size()];
    twice += p.x * q.y - q.x * p.y;
  }
  return 0.5 * std::abs(twice);
}

std::vector<Vec2> clip_convex(std::span<const Vec2> subject, std::span<const Vec2> clip) {
  std::vector<Vec2> out(subject.begin(), subject.end());
  std::vector<Vec2> input;
  for (size_t e = 0; e < clip.size() && !out.empty(); ++e) {
    const Vec2& a = clip[e];
    const Vec2& b = clip[(e + 1) % clip.size()];
    input.swap(out);
    out.clear();
    for (size_t i = 0; i < input.size(); ++i) {
      const Vec2& cur = input[i];
      const Vec2& prev = input[(i + input.size() - 1) % input.size()];
      const bool cur_in = cross(a, b, cur) >= -kEdgeEps;
      const bool prev_in = cross(a, b, prev) >= -kEdgeEps;
      if (cur_in) {
        if (!prev_in) out.push_back(line_intersection(prev, cur, a, b));
        out.push_back(cur);
      } else if (prev_in) {
        out.push_back(line_intersection(prev, cur, a, b));
      }
    }
  }
  return out;
}

OverlapResult overlap_bev(const Box3D& a, const Box3D& b) {
  OverlapResult r;
  const double area_a = a.bev_area();
  const double area_b = b.bev_area();
  if (!(area_a > kDegenerateArea) || !(area_b > kDegenerateArea)) {
    r.degenerate = true;
    return r;
  }
  const auto ca = bev_corners(a);
  const auto cb = bev_corners(b);
  const auto poly = clip_convex(ca, cb);
  r.intersection = std::min({polygon_area(poly), area_a, area_b});
  const double uni = area_a + area_b - r.intersection;
  r.iou = uni > 0 ? std::clamp(r.intersection / uni, 0.0, 1.0) : 0.0;
  return r;
}

OverlapResult overlap_3d(const Box3D& a, const Box3D& b) {
  OverlapResult bev = overlap_bev(a, b);
  OverlapResult r;
  r.degenerate = bev.degenerate || !(a.h > 0) || !(b.h > 0);
  if (r.degenerate) return r;
  const double dz = std::max(0.0, std::min(a.z_max(), b.z_max()) - std::max(a.z_min(), b.z_min()));
  r.intersection = bev.intersection * dz;
  const double uni = a.volume() + b.volume() - r.intersection;
  r.iou = uni > 0 ? std::clamp(r.intersection / uni, 0.0, 1.0) : 0.0;
  return r;
}

bool box_contains(const Box3D& box, const Vec3& p, double tol) {
  const double dx = p.x - box.center.x;
  const double dy = p.y - box.center.y;
  const double c = std::cos(box.yaw);
  const double s = std::sin(box.yaw);
  const double lx = c * dx + s * dy;
  const double ly = -s * dx + c * dy;
  return std::abs(lx) <= 0.5 * box.l + tol && std::abs(ly) <= 0.5 * box.w + tol &&
         std::abs(p.z - box.center.z) <= 0.5 * box.h + tol;
}

Vec3 transform_point(const Vec3& p, const Transform& t) {
  switch (t.kind) {
    case Transform::Kind::kFlipX:
      return {p.x, -p.y, p.z};
    case Transform::Kind::kFlipY:
      return {-p.x, p.y, p.z};
    case Transform::Kind::kRotate: {
      const double c = std::cos(t.value);
      const double s = std::sin(t.value);
      return {c * p.x - s * p.y, s * p.x + c * p.y, p.z};
    }
    case Transform::Kind::kScale:
      return {p.x * t.value, p.y * t.value, p.z * t.value};
    case Transform::Kind::kTranslate:
      return {p.x + t.offset.x, p.y + t.offset.y, p.z + t.offset.z};
  }
  return p;
}

Box3D transform_box(const Box3D& b, const Transform& t) {
  Box3D out = b;
  out.center = transform_point(b.center, t);
  switch (t.kind) {
    case Transform::Kind::kFlipX:
      out.yaw = wrap_angle(-b.yaw);
      if (b.velocity) out.velocity = Vec2{b.velocity->x, -b.velocity->y};
      break;
    case Transform::Kind::kFlipY:
      out.yaw = wrap_angle(std::numbers::pi - b.yaw);
      if (b.velocity) out.velocity = Vec2{-b.velocity->x, b.velocity->y};
      break;
    case Transform::Kind::kRotate:
      out.yaw = wrap_angle(b.yaw + t.value);
      if (b.velocity) {
        const double c = std::cos(t.value);
        const double s = std::sin(t.value);
        out.velocity = Vec2{c * b.velocity->x - s * b.velocity->y,
                            s * b.velocity->x + c * b.velocity->y};
      }
      break;
    case Transform::Kind::kScale:
      out.l *= t.value;
      out.w *= t.value;
      out.h *= t.value;
      if (b.velocity) out.velocity = Vec2{b.velocity->x * t.value, b.velocity->y * t.value};
      break;
    case Transform::Kind::kTranslate:
      break;
  }
  return out;
}

}  // namespace griddet
