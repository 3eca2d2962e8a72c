#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "griddet/grid_spec.hpp"
#include "griddet/lidar_io.hpp"
#include "griddet/sparse_ops.hpp"

namespace griddet {

enum class EncoderKind { kPillar, kVoxel, kMvf };

const char* encoder_name(EncoderKind k);
EncoderKind parse_encoder(const std::string& s);

struct EncoderConfig {
  EncoderKind kind = EncoderKind::kPillar;
  std::vector<int> mlp_channels{32};
  bool centroid_offsets = true;
  bool center_offsets = true;

  int out_channels() const { return mlp_channels.back(); }
  // Width of the decorated per-point feature for a grid view.
  int decorated_dims(const GridSpec& spec) const;
  void validate() const;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

// Row-major N x cols float matrix.
struct FeatureMatrix {
  size_t rows = 0;
  int cols = 0;
  std::vector<float> data;

  FeatureMatrix() = default;
  FeatureMatrix(size_t r, int c) : rows(r), cols(c), data(r * static_cast<size_t>(c), 0.f) {}
  std::span<float> row(size_t i) { return {data.data() + i * cols, static_cast<size_t>(cols)}; }
  std::span<const float> row(size_t i) const {
    return {data.data() + i * cols, static_cast<size_t>(cols)};
  }
};

struct Linear {
  int cin = 0;
  int cout = 0;
  std::vector<float> weight;  // cout x cin
  std::vector<float> bias;

  size_t num_params() const { return weight.size() + bias.size(); }
};

// Per-point (linear, ReLU) stack, accumulated in double per row.
FeatureMatrix mlp_forward(const FeatureMatrix& x, std::span<const Linear> layers);

struct EncoderWeights {
  std::vector<Linear> mlp;       // pillar/voxel view
  std::vector<Linear> cyl_mlp;   // cylindrical view (mvf only)
  std::vector<Linear> fusion;    // one layer (mvf only)
};

inline constexpr int64_t kOutside = -1;

// Linear cell index per point, or kOutside.
std::vector<int64_t> assign_cells(const PointCloud& cloud, const GridSpec& spec);

// [x, y, z, intensity, dt, xyz - cell centroid, view-axis offsets to the cell
// center]; 10 columns for 2D views, 11 for voxels. Rows of outside points are
// zero.
FeatureMatrix decorate_points(const PointCloud& cloud, std::span<const int64_t> cells,
                              const GridSpec& spec, const EncoderConfig& config);

struct ScatterResult {
  std::vector<int64_t> cells;     // occupied cell ids, ascending
  FeatureMatrix features;         // one row per occupied cell
  std::vector<int32_t> slot;      // per point: row in `features`, or -1
};

ScatterResult scatter_max(const FeatureMatrix& point_features, std::span<const int64_t> cells);

// Per-point copy of its cell's pooled row (zeros for outside points).
FeatureMatrix gather_rows(const ScatterResult& pooled, size_t num_points);

SparseTensor pillar_encode(const PointCloud& cloud, const GridSpec& spec, const EncoderConfig& config,
                           const EncoderWeights& weights);
SparseTensor voxel_encode(const PointCloud& cloud, const GridSpec& spec, const EncoderConfig& config,
                          const EncoderWeights& weights);

struct MvfTrace {
  FeatureMatrix pillar_gathered;
  FeatureMatrix cyl_gathered;
};

SparseTensor mvf_encode(const PointCloud& cloud, const GridSpec& pillar_spec,
                        const GridSpec& cyl_spec, const EncoderConfig& config,
                        const EncoderWeights& weights, MvfTrace* trace = nullptr);

// Occupied cells as a stride-1 sparse tensor over the spec grid.
SparseTensor cells_to_sparse(const ScatterResult& pooled, const GridSpec& spec);

}  // namespace griddet
