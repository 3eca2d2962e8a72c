#pragma once

#include <array>
#include <cstdint>
#include <optional>

#include <nlohmann/json_fwd.hpp>

namespace griddet {

enum class GridView { kCartesian2D, kCartesian3D, kCylindrical };

// Half-open interval [min, max) split into cells of width `cell`.
struct Axis {
  double min = 0.0;
  double max = 1.0;
  double cell = 1.0;

  int32_t dims() const;
  double extent() const { return max - min; }
  // Bounds are compared at float32 resolution, the precision of stored points.
  bool contains(double v) const {
    return v >= static_cast<float>(min) && v < static_cast<float>(max);
  }
  // Index of the cell holding v, or nullopt outside [min, max).
  std::optional<int32_t> index(double v) const;
  double cell_center(int32_t i) const { return min + (static_cast<double>(i) + 0.5) * cell; }
};

// A grid over one of three coordinate views. Axis 0 maps to sparse/dense
// column index, axis 1 to the row index, axis 2 to depth.
//   cartesian2d: (x, y, z)    z is a single-cell crop axis
//   cartesian3d: (x, y, z)
//   cylindrical: (yaw, z, rho) rho is a single-cell crop axis
struct GridSpec {
  GridView view = GridView::kCartesian2D;
  std::array<Axis, 3> axes;

  static GridSpec pillar(double xy_min, double xy_max, double z_min, double z_max, double cell);
  static GridSpec voxel(double xy_min, double xy_max, double z_min, double z_max, double cell_xy,
                        double cell_z);
  static GridSpec cylindrical(double rho_max, double z_min, double z_max, double yaw_cell_rad,
                              double z_cell);

  // Detection-range defaults: horizontal [-76.8, 76.8), vertical [-2, 4).
  static GridSpec default_pillar() { return pillar(-76.8, 76.8, -2.0, 4.0, 0.075); }
  static GridSpec default_voxel() { return voxel(-76.8, 76.8, -2.0, 4.0, 0.075, 0.15); }
  static GridSpec default_cylindrical();

  int rank() const { return view == GridView::kCartesian3D ? 3 : 2; }
  // Extents as (depth, rows, cols); depth is 1 for rank-2 views.
  std::array<int32_t, 3> spatial_dims() const;
  int64_t num_cells() const;

  // View coordinates of a point: (x,y,z) or (atan2(y,x), z, hypot(x,y)).
  std::array<double, 3> view_coords(double x, double y, double z) const;
  bool contains(double x, double y, double z) const;
  // Cell coordinate as (depth, row, col), or nullopt outside.
  std::optional<std::array<int32_t, 3>> cell_of(double x, double y, double z) const;
  int64_t linear_index(const std::array<int32_t, 3>& c) const;

  void validate() const;
};

void to_json(nlohmann::json& j, const GridSpec& g);
void from_json(const nlohmann::json& j, GridSpec& g);

}  // namespace griddet
