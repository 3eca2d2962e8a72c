#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "griddet/geometry.hpp"
#include "griddet/grid_spec.hpp"

namespace griddet {

// One LiDAR return in the ego frame. dt is the (non-positive) time offset of
// its source sweep relative to the current sweep.
struct Point {
  float x = 0.f;
  float y = 0.f;
  float z = 0.f;
  float intensity = 0.f;
  float dt = 0.f;

  bool operator==(const Point&) const = default;
};

// Ego-to-world rigid transform.
struct Pose {
  std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major
  Vec3 translation;

  static Pose identity() { return {}; }
  static Pose from_yaw(double yaw, Vec3 t);

  Vec3 apply(const Vec3& p) const;
  Pose inverse() const;
  // (this * other)(p) = this(other(p))
  Pose compose(const Pose& other) const;
  void validate() const;
};

struct PointCloud {
  std::vector<Point> points;
  std::string frame_id;
  int num_source_frames = 1;

  size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  void validate() const;
};

enum class ObjectClass : uint8_t { kVehicle = 0, kPedestrian = 1, kCyclist = 2 };
inline constexpr int kNumClasses = 3;

const char* class_name(ObjectClass c);
ObjectClass parse_class(const std::string& name);

struct BoxLabel {
  std::string frame_id;
  Box3D box;
  ObjectClass cls = ObjectClass::kVehicle;
  int num_points = 0;
};

// Column layout of a binary point file: each record holds `num_columns`
// little-endian float32 values; the remaining fields give the column index of
// each attribute (-1 when absent, read as 0).
struct PointSchema {
  int num_columns = 5;
  int x = 0, y = 1, z = 2, intensity = 3, dt = 4;

  static PointSchema xyzit() { return {}; }
  static PointSchema xyzi() { return {4, 0, 1, 2, 3, -1}; }
  size_t record_bytes() const { return static_cast<size_t>(num_columns) * 4; }
};

PointCloud decode_points(std::span<const uint8_t> bytes, const PointSchema& schema = {},
                         std::string frame_id = {});
std::vector<uint8_t> encode_points(const PointCloud& cloud, const PointSchema& schema = {});

PointCloud load_point_file(const std::filesystem::path& path, const PointSchema& schema = {});
void save_point_file(const std::filesystem::path& path, const PointCloud& cloud,
                     const PointSchema& schema = {});

struct PastSweep {
  PointCloud cloud;
  Pose pose;
  // Sweeps back from the current one; 0 takes the position in the list + 1.
  int lag = 0;
};

// Merges past sweeps (most recent first) into the current ego frame. A past
// sweep with lag k has its dt decreased by k * frame_gap.
PointCloud assemble_frames(const PointCloud& current, std::span<const PastSweep> past,
                           const Pose& current_pose, int max_frames, double frame_gap = 0.1);

// Keeps points with min <= coordinate < max on every axis of the spec.
PointCloud crop_range(const PointCloud& cloud, const GridSpec& spec);

// Annotation JSON Lines: one object per line with keys
// {frame_id, center, dims, yaw, class, num_points, velocity?}.
std::vector<BoxLabel> parse_labels_jsonl(const std::string& text);
std::vector<BoxLabel> load_labels(const std::filesystem::path& path);
std::string format_label_line(const BoxLabel& label);
void save_labels(const std::filesystem::path& path, std::span<const BoxLabel> labels);

// Sidecar manifest describing one sequence of sweeps.
struct FrameEntry {
  std::string frame_id;
  std::filesystem::path points;               // resolved against the manifest directory
  std::optional<std::filesystem::path> labels;
  double timestamp = 0.0;
  Pose pose;
};

struct FrameManifest {
  std::string sequence_id;
  double frame_gap = 0.1;
  std::vector<FrameEntry> frames;
};

FrameManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const FrameManifest& manifest);

}  // namespace griddet
