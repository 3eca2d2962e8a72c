#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "griddet/lidar_io.hpp"
#include "griddet/scene.hpp"

namespace griddet {

struct PasteConfig {
  std::filesystem::path db_path;
  std::array<int, kNumClasses> samples{15, 10, 10};
  // Pasting stops from this epoch on.
  int fade_after_epoch = 15;
};

struct AugmentConfig {
  double flip_prob = 0.5;  // per axis
  std::array<double, 2> rotation{-0.7853981633974483, 0.7853981633974483};
  std::array<double, 2> scale{0.9, 1.1};
  double translation_std = 0.5;  // meters, per axis
  std::optional<PasteConfig> paste;
  double frame_drop_prob = 0.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const AugmentConfig& c);
void from_json(const nlohmann::json& j, AugmentConfig& c);

// The transform sequence a seed selects, in application order.
std::vector<Transform> sample_global(const AugmentConfig& config, uint64_t seed);

Scene apply_transforms(const Scene& scene, std::span<const Transform> ops);
Scene apply_global(const Scene& scene, const AugmentConfig& config, uint64_t seed);

struct GtSample {
  BoxLabel label;
  // Points in the box frame: centered on the box, yaw removed.
  std::vector<Point> points;
};

struct GtDatabase {
  std::array<std::vector<GtSample>, kNumClasses> samples;

  size_t size() const;
  void validate() const;
};

std::vector<Point> crop_box_points(const PointCloud& cloud, const Box3D& box);
GtDatabase build_gt_database(std::span<const Scene> frames);

// Directory holding <class>.bin point blobs and index.json.
void save_gt_database(const GtDatabase& db, const std::filesystem::path& dir);
GtDatabase load_gt_database(const std::filesystem::path& dir);

// Points of a sample back in the ego frame at the stored pose.
std::vector<Point> place_sample(const GtSample& s);

Scene paste_samples(const Scene& scene, const GtDatabase& db, const PasteConfig& config, int epoch, uint64_t seed);

// Each past sweep survives independently with probability 1 - prob;
// survivors keep their original lag.
std::vector<PastSweep> drop_frames(std::span<const PastSweep> past, double prob, uint64_t seed);

}  // namespace griddet
