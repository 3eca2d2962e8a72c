#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "griddet/geometry.hpp"
#include "griddet/lidar_io.hpp"
#include "griddet/network.hpp"

namespace griddet {

struct Detection {
  std::string frame_id;
  Box3D box;
  ObjectClass cls = ObjectClass::kVehicle;
  double score = 0.0;
  int32_t peak_row = -1;
  int32_t peak_col = -1;
};

struct Peak {
  int channel = 0;
  int32_t row = 0;
  int32_t col = 0;
  double score = 0.0;
};

double sigmoid(double logit);

// Peaks of a pre-sigmoid heatmap, per channel: cells that beat every 3x3
// neighbour under the order (value descending, then (row, col) ascending),
// with score > threshold; the top max_k per channel, by descending score.
std::vector<Peak> extract_peaks(const DenseTensor& heatmap, int max_k, double threshold);

// Placement of the head output grid in the ego frame.
struct OutputGeometry {
  double x_min = -76.8;
  double y_min = -76.8;
  double cell = 0.3;

  static OutputGeometry of(const ModelConfig& config);
};

// Regression targets of a box at its center cell.
struct BoxTarget {
  int32_t row = 0;
  int32_t col = 0;
  double offset_x = 0.0;
  double offset_y = 0.0;
  double z = 0.0;
  std::array<double, 3> log_dims{};
  double sin_yaw = 0.0;
  double cos_yaw = 1.0;
};

BoxTarget encode_target(const Box3D& box, const OutputGeometry& geom);

struct DecodeConfig {
  int max_k = 500;
  double threshold = 0.05;
  std::array<double, kNumClasses> alpha{0.5, 0.5, 0.5};
  std::array<double, kNumClasses> nms_iou{0.7, 0.2, 0.25};
  bool nms = true;
};

void to_json(nlohmann::json& j, const DecodeConfig& c);
void from_json(const nlohmann::json& j, DecodeConfig& c);

double rescore(double score, double iou_pred, double alpha);

// Boxes for the peaks of one head group; scores are rescored when the group
// carries an IoU map.
std::vector<Detection> decode_boxes(std::span<const Peak> peaks, const GroupOutput& group,
                                    const OutputGeometry& geom, const DecodeConfig& config,
                                    const std::string& frame_id = {});

// Greedy per-class rotated BEV NMS. Survivors come back in descending score
// order, ties in input order.
std::vector<Detection> nms_rotated(std::span<const Detection> dets,
                                   const std::array<double, kNumClasses>& iou_threshold);

// Peaks, boxes and NMS for every group of a head output.
std::vector<Detection> decode_frame(const HeadOutput& head, const OutputGeometry& geom,
                                    const DecodeConfig& config, const std::string& frame_id);

// Detections JSON Lines: {frame_id, class, score, center, dims, yaw, velocity?}.
std::string format_detection_line(const Detection& d);
std::vector<Detection> parse_detections_jsonl(const std::string& text);
std::vector<Detection> load_detections(const std::filesystem::path& path);

}  // namespace griddet
