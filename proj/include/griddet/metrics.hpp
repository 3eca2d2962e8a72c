#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "griddet/decode.hpp"
#include "griddet/lidar_io.hpp"

namespace griddet {

enum class IouKind { kBev, k3d };
enum class Difficulty { kL1, kL2 };

struct EvalRange {
  double x_min = -76.8, x_max = 76.8;
  double y_min = -76.8, y_max = 76.8;
  bool contains(const Vec3& c) const { return c.x >= x_min && c.x < x_max && c.y >= y_min && c.y < y_max; }
};

struct EvalConfig {
  IouKind iou_kind = IouKind::k3d;
  std::array<double, kNumClasses> iou_threshold{0.7, 0.5, 0.5};
  Difficulty difficulty = Difficulty::kL2;
  int recall_points = 101;
  // Labels and detections whose centers fall outside are dropped first.
  std::optional<EvalRange> range = EvalRange{};

  void validate() const;
};

void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);

int min_points(Difficulty d);
std::vector<BoxLabel> filter_difficulty(std::span<const BoxLabel> labels, Difficulty level);

struct Match {
  size_t det = 0;
  int label = -1;  // index into the labels, -1 for a false positive
  double iou = 0.0;
  // 1 - dtheta/pi for true positives.
  double heading_weight = 0.0;
};

// Detections in descending score order; each takes the unmatched same-class
// label of highest IoU at or above the class threshold.
std::vector<Match> match_frame(std::span<const Detection> dets, std::span<const BoxLabel> labels,
                               const EvalConfig& config);

double heading_weight(double yaw_pred, double yaw_gt);

struct PrPoint {
  double score = 0.0;
  double recall = 0.0;
  double precision = 0.0;
  double recall_h = 0.0;
  double precision_h = 0.0;
};

struct ClassResult {
  ObjectClass cls = ObjectClass::kVehicle;
  bool present = false;  // false when the class has no labels
  double ap = 0.0;
  double aph = 0.0;
  int64_t num_gt = 0;
  int64_t tp = 0;
  int64_t fp = 0;
  int64_t fn = 0;
  std::vector<PrPoint> curve;
};

struct EvalResult {
  EvalConfig config;
  std::vector<ClassResult> classes;
  int64_t num_frames = 0;
};

// Scored outcome of one detection in the pooled evaluation.
struct ScoredMatch {
  ObjectClass cls = ObjectClass::kVehicle;
  double score = 0.0;
  bool tp = false;
  double weight = 0.0;
};

struct MatchSet {
  std::vector<ScoredMatch> matches;
  std::array<int64_t, kNumClasses> num_gt{};
  int64_t num_frames = 0;

  void merge(const MatchSet& other);
};

// Matching for one frame with range and difficulty filtering applied.
// Detections matched to a label below the difficulty level are ignored.
MatchSet evaluate_frame(std::span<const Detection> dets, std::span<const BoxLabel> labels, const EvalConfig& config);

EvalResult compute_ap_aph(const MatchSet& matches, const EvalConfig& config);

// Groups both inputs by frame_id and pools every frame.
EvalResult evaluate(std::span<const Detection> dets, std::span<const BoxLabel> labels, const EvalConfig& config);

nlohmann::json eval_report_json(const EvalResult& result);
std::string eval_report_table(const EvalResult& result);

}  // namespace griddet
