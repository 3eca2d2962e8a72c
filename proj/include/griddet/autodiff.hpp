#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "griddet/geometry.hpp"
#include "griddet/grid_spec.hpp"
#include "griddet/lidar_io.hpp"

namespace griddet::ad {

// Reverse-mode tape in double precision. Nodes are appended in topological
// order, so backward is a single reverse sweep.
class Tape {
 public:
  using Id = int;

  Id leaf(std::vector<double> value, std::vector<int> shape);

  // x: N x Cin, w: Cout x Cin, b: Cout -> N x Cout.
  Id linear(Id x, Id w, Id b);
  Id relu(Id x);
  // points: N x 5 (x, y, z, intensity, dt) -> N x 10 decorated features
  // [x, y, z, i, dt, xyz - slot centroid, xy - cell center]. `slot` gives the
  // group of each point; `centers` holds (cx, cy) per slot.
  Id decorate(Id points, std::span<const int32_t> slot, std::span<const double> centers);
  // x: N x C -> num_slots x C channel-wise max per slot. Gradient goes to the
  // argmax row per channel, ties to the lowest row.
  Id scatter_max(Id x, std::span<const int32_t> slot, int num_slots);
  // x: M x C rows placed at linear cells of an H x W grid -> C x H x W.
  Id to_grid(Id x, std::span<const int64_t> cells, int height, int width);
  // x: Cin x H x W, w: Cout x Cin x k x k, b: Cout; stride 1, zero padding
  // (k-1)/2 * dilation.
  Id conv2d(Id x, Id w, Id b, int dilation = 1);

  // Penalty-reduced focal loss on channel `channel` of a C x H x W logit map,
  // normalized by max(1, number of cells with target 1).
  Id focal_loss(Id logits, int channel, std::span<const double> target);

  struct Site {
    int channel;
    int row;
    int col;
    double target;
  };
  // sum |map[c, r, q] - target| over sites, divided by `norm`. With beta > 0
  // the penalty is smooth L1: 0.5 d^2 / beta for |d| < beta, |d| - beta / 2
  // beyond.
  Id l1_at(Id map, std::span<const Site> sites, double norm, double beta = 0.0);
  Id weighted_sum(std::span<const Id> terms, std::span<const double> weights);
  // sum_i weights[i] * x[i] over the flattened tensor.
  Id dot(Id x, std::span<const double> weights);

  void backward(Id root);
  void zero_grad();

  const std::vector<double>& value(Id id) const { return nodes_[static_cast<size_t>(id)].value; }
  const std::vector<double>& grad(Id id) const { return nodes_[static_cast<size_t>(id)].grad; }
  const std::vector<int>& shape(Id id) const { return nodes_[static_cast<size_t>(id)].shape; }
  double scalar(Id id) const { return value(id).at(0); }
  size_t size() const { return nodes_.size(); }
  const std::string& op(Id id) const { return nodes_[static_cast<size_t>(id)].op; }

 private:
  struct Node {
    std::string op;
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::function<void(Tape&)> back;
  };

  Id push(std::string op, std::vector<int> shape, std::vector<double> value, std::function<void(Tape&)> back);
  Node& node(Id id) { return nodes_.at(static_cast<size_t>(id)); }
  const Node& check(Id id, size_t rank, const char* op) const;

  std::vector<Node> nodes_;
};

// Penalty-reduced focal loss value for one cell given a probability; the
// scalar form used by tests.
double focal_term(double p, double target);

// ---------------------------------------------------------------------------
// Toy detection chain: decoration -> MLP -> scatter-max -> dense conv stack
// -> heatmap / box / IoU losses.

// Output channels of the head: heatmap, offset x/y, z, log l/w/h, sin, cos, iou.
inline constexpr int kHeadChannels = 10;

struct ChainConfig {
  GridSpec grid = GridSpec::pillar(-3.2, 3.2, -3.0, 3.0, 0.2);
  std::vector<int> mlp_channels{16};
  std::vector<int> conv_channels{16};
  int kernel = 3;
  double heat_weight = 1.0;
  double box_weight = 1.0;
  double iou_weight = 1.0;
  double box_beta = 0.1;        // smooth-L1 knee for box regression; 0 is plain L1
  double gaussian_sigma = 1.0;  // heatmap target spread, cells
  // Step k uses lr * max(0, 1 - k / decay_steps); 0 keeps lr constant. The
  // schedule does not depend on the number of steps run, so a longer fit
  // extends a shorter one.
  int decay_steps = 500;
  uint64_t seed = 0;
};

inline constexpr double kDefaultToyLr = 0.1;

struct ChainParams {
  // Flattened order: mlp (w, b)..., conv (w, b)..., head (w, b).
  std::vector<std::vector<double>> tensors;
  std::vector<std::vector<int>> shapes;

  static ChainParams init(const ChainConfig& config);
  size_t count() const;
};

struct ChainTargets {
  std::vector<double> heatmap;  // H x W
  std::vector<Tape::Site> box_sites;
  std::vector<Box3D> boxes;
  std::vector<std::pair<int, int>> centers;  // (row, col) per box
};

ChainTargets make_targets(const ChainConfig& config, std::span<const Box3D> boxes);

struct ChainOutput {
  double loss = 0.0;
  double heat = 0.0;
  double box = 0.0;
  double iou = 0.0;
  std::vector<double> iou_targets;  // actual IoU of each decoded box
};

struct ChainGraph {
  Tape tape;
  std::vector<Tape::Id> params;
  Tape::Id points = -1;
  Tape::Id loss = -1;
  ChainOutput out;
};

// Builds the forward graph. With `frozen_iou`, those values replace the IoU
// targets recomputed from the decoded boxes.
ChainGraph build_chain(const ChainConfig& config, const ChainParams& params, const PointCloud& cloud,
                       const ChainTargets& targets, const std::optional<std::vector<double>>& frozen_iou = std::nullopt);

struct FitResult {
  std::vector<double> trace;      // loss before each step, then the final loss
  std::vector<double> best_so_far;
  ChainParams params;
};

FitResult toy_fit(const ChainConfig& config, const PointCloud& cloud, std::span<const Box3D> boxes, int steps,
                  double lr);

// ---------------------------------------------------------------------------
// Finite-difference checks.

struct GradcheckResult {
  std::string op;
  double max_rel_error = 0.0;
  int seeds = 0;
  bool passed = false;
};

// ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12) per leaf,
// central differences with step eps.
double relative_error(std::span<const double> analytic, std::span<const double> numeric);

// Each op on randomized small shapes plus the full chain, over `seeds` seeds.
std::vector<GradcheckResult> gradcheck_all(int seeds, double eps = 1e-5, double tol = 1e-4);

}  // namespace griddet::ad
