#pragma once

#include <cstdint>
#include <vector>

#include "griddet/grid_spec.hpp"
#include "griddet/lidar_io.hpp"

namespace griddet {

struct Scene {
  PointCloud cloud;
  std::vector<BoxLabel> labels;
};

inline constexpr uint64_t kCanonicalSceneSeed = 7;
inline constexpr size_t kCanonicalScenePoints = 150000;

// Synthetic single-sweep frame: a ground ring whose density falls off with
// range, box-shaped objects of each class, and vertical clutter. Every point
// lies inside `range`; label num_points counts the points inside each box.
Scene synthetic_scene(uint64_t seed, size_t num_points, const GridSpec& range = GridSpec::default_pillar());

// Fixed-seed 150k-point frame used for profiling.
Scene canonical_scene();

// Five points on one vehicle-sized box; the toy-fit scene.
Scene toy_scene();

}  // namespace griddet
