#include "griddet/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "griddet/rng.hpp"

namespace griddet {

namespace {

constexpr double kGroundZ = -1.8;

struct ClassShape {
  ObjectClass cls;
  double l, w, h;
  int count;
};

Point make_point(double x, double y, double z, double intensity) {
  return {static_cast<float>(x), static_cast<float>(y), static_cast<float>(z), static_cast<float>(intensity), 0.f};
}

}  // namespace

Scene synthetic_scene(uint64_t seed, size_t num_points, const GridSpec& range) {
  RngStream rng(seed, hash_name("scene"));
  Scene scene;
  scene.cloud.frame_id = "synthetic_" + std::to_string(seed);
  const Axis& ax = range.axes[0];
  const Axis& ay = range.axes[1];
  const Axis& az = range.axes[2];
  const double half = std::min({ax.max, -ax.min, ay.max, -ay.min});
  const double r_max = std::max(2.5, 0.95 * half);

  const ClassShape shapes[] = {{ObjectClass::kVehicle, 4.5, 1.9, 1.6, 30},
                               {ObjectClass::kPedestrian, 0.8, 0.8, 1.75, 20},
                               {ObjectClass::kCyclist, 1.8, 0.7, 1.7, 10}};
  for (const auto& s : shapes) {
    for (int i = 0, tries = 0; i < s.count && tries < 1000; ++tries) {
      const double r = rng.uniform(std::min(5.0, 0.5 * r_max), r_max - 3.0 > 1.0 ? r_max - 3.0 : r_max);
      const double phi = rng.uniform(-std::numbers::pi, std::numbers::pi);
      Box3D b;
      const double jitter = rng.uniform(0.9, 1.1);
      b.l = s.l * jitter;
      b.w = s.w * jitter;
      b.h = s.h * jitter;
      b.center = {r * std::cos(phi), r * std::sin(phi), kGroundZ + 0.5 * b.h};
      b.yaw = wrap_angle(rng.uniform(-std::numbers::pi, std::numbers::pi));
      bool clear = true;
      for (const auto& other : scene.labels) {
        if (overlap_bev(b, other.box).intersection > 0.0) {
          clear = false;
          break;
        }
      }
      if (!clear) continue;
      scene.labels.push_back({scene.cloud.frame_id, b, s.cls, 0});
      ++i;
    }
  }

  auto inside = [&](double x, double y, double z) {
    return x >= ax.min && x < ax.max && y >= ay.min && y < ay.max && z >= az.min && z < az.max;
  };
  auto& pts = scene.cloud.points;
  pts.reserve(num_points);
  const size_t n_objects = scene.labels.empty() ? 0 : num_points / 5;
  const size_t n_clutter = num_points * 3 / 20;
  const size_t n_ground = num_points - n_objects - n_clutter;

  // Ground: log-uniform in range, so areal density falls off as 1/r^2.
  const double log_lo = std::log(2.0), log_hi = std::log(r_max);
  while (pts.size() < n_ground) {
    const double r = std::exp(rng.uniform(log_lo, log_hi));
    const double phi = rng.uniform(-std::numbers::pi, std::numbers::pi);
    const double x = r * std::cos(phi), y = r * std::sin(phi), z = kGroundZ + 0.05 * rng.normal();
    if (inside(x, y, z)) pts.push_back(make_point(x, y, z, rng.uniform(0.0, 0.3)));
  }
  // Objects: points fill each box, nearer boxes receive more returns.
  if (n_objects > 0) {
    std::vector<double> weight;
    double total = 0.0;
    for (const auto& lb : scene.labels) {
      const double r = std::hypot(lb.box.center.x, lb.box.center.y);
      weight.push_back(lb.box.bev_area() / std::max(r, 1.0));
      total += weight.back();
    }
    const size_t target = n_ground + n_objects;
    for (size_t k = 0; k < scene.labels.size() && pts.size() < target; ++k) {
      const Box3D& b = scene.labels[k].box;
      const size_t want = k + 1 == scene.labels.size()
                              ? target - pts.size()
                              : std::min(target - pts.size(), static_cast<size_t>(std::llround(n_objects * weight[k] / total)));
      const double c = std::cos(b.yaw), s = std::sin(b.yaw);
      for (size_t i = 0; i < want;) {
        const double u = rng.uniform(-0.49, 0.49) * b.l, v = rng.uniform(-0.49, 0.49) * b.w;
        const double x = b.center.x + c * u - s * v, y = b.center.y + s * u + c * v;
        const double z = b.center.z + rng.uniform(-0.49, 0.49) * b.h;
        if (!inside(x, y, z)) continue;
        pts.push_back(make_point(x, y, z, rng.uniform(0.2, 1.0)));
        ++i;
      }
    }
  }
  // Clutter: vertical wall segments.
  std::vector<std::array<double, 4>> walls;
  for (int i = 0; i < 40; ++i) {
    const double r = rng.uniform(10.0, r_max);
    const double phi = rng.uniform(-std::numbers::pi, std::numbers::pi);
    const double dir = rng.uniform(-std::numbers::pi, std::numbers::pi);
    const double len = rng.uniform(2.0, 15.0);
    walls.push_back({r * std::cos(phi), r * std::sin(phi), std::cos(dir) * len, std::sin(dir) * len});
  }
  while (pts.size() < num_points) {
    const auto& w = walls[rng.below(walls.size())];
    const double t = rng.uniform();
    const double x = w[0] + t * w[2], y = w[1] + t * w[3], z = rng.uniform(kGroundZ, std::min(3.5, az.max - 0.01));
    if (inside(x, y, z)) pts.push_back(make_point(x, y, z, rng.uniform(0.0, 1.0)));
  }

  for (auto& lb : scene.labels) {
    int count = 0;
    for (const auto& p : pts) count += box_contains(lb.box, {p.x, p.y, p.z}, 1e-6) ? 1 : 0;
    lb.num_points = count;
  }
  return scene;
}

Scene canonical_scene() { return synthetic_scene(kCanonicalSceneSeed, kCanonicalScenePoints); }

Scene toy_scene() {
  Scene s;
  s.cloud.frame_id = "toy";
  const float pts[5][3] = {{1.0f, 0.4f, -0.5f}, {-0.9f, 0.5f, -0.2f}, {0.8f, -0.6f, 0.1f},
                           {-1.1f, -0.4f, 0.3f}, {0.1f, 0.05f, 0.0f}};
  const float intensity[5] = {0.2f, 0.4f, 0.6f, 0.8f, 1.0f};
  for (int i = 0; i < 5; ++i) s.cloud.points.push_back({pts[i][0], pts[i][1], pts[i][2], intensity[i], 0.f});
  Box3D b;
  b.center = {0.0, 0.0, 0.0};
  b.l = 2.6;
  b.w = 1.4;
  b.h = 1.2;
  b.yaw = 0.3;
  s.labels.push_back({"toy", b, ObjectClass::kVehicle, 0});
  for (const auto& p : s.cloud.points) s.labels[0].num_points += box_contains(b, {p.x, p.y, p.z}, 1e-6) ? 1 : 0;
  return s;
}

}  // namespace griddet
