#include "griddet/grid_encoders.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "griddet/error.hpp"
#include "griddet/json_util.hpp"

namespace griddet {

namespace {

// Cell ids decoded back to (depth, row, col).
Coord coord_of(int64_t id, const GridSpec& spec) {
  const auto d = spec.spatial_dims();
  const int64_t plane = static_cast<int64_t>(d[1]) * d[2];
  return {static_cast<int32_t>(id / plane), static_cast<int32_t>((id % plane) / d[2]),
          static_cast<int32_t>(id % d[2])};
}

// Sum in ascending value order so the result does not depend on point order.
double canonical_sum(std::vector<double>& v) {
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

void check_weights(std::span<const Linear> layers, int in_dims, const char* name) {
  int c = in_dims;
  for (size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].cin != c) {
      throw ConfigError(std::string(name) + "." + std::to_string(i) + ": expects " +
                        std::to_string(layers[i].cin) + " inputs, got " + std::to_string(c));
    }
    c = layers[i].cout;
  }
}

SparseTensor encode_cartesian(const PointCloud& cloud, const GridSpec& spec,
                              const EncoderConfig& config, const EncoderWeights& weights) {
  spec.validate();
  config.validate();
  check_weights(weights.mlp, config.decorated_dims(spec), "encoder.mlp");
  const auto cells = assign_cells(cloud, spec);
  const auto decorated = decorate_points(cloud, cells, spec, config);
  const auto embedded = mlp_forward(decorated, weights.mlp);
  return cells_to_sparse(scatter_max(embedded, cells), spec);
}

}  // namespace

const char* encoder_name(EncoderKind k) {
  switch (k) {
    case EncoderKind::kPillar: return "pillar";
    case EncoderKind::kVoxel: return "voxel";
    case EncoderKind::kMvf: return "mvf";
  }
  return "?";
}

EncoderKind parse_encoder(const std::string& s) {
  if (s == "pillar") return EncoderKind::kPillar;
  if (s == "voxel") return EncoderKind::kVoxel;
  if (s == "mvf") return EncoderKind::kMvf;
  throw ConfigError("unknown encoder kind '" + s + "'");
}

int EncoderConfig::decorated_dims(const GridSpec& spec) const {
  int d = 5;
  if (centroid_offsets) d += 3;
  if (center_offsets) d += spec.rank();
  return d;
}

void EncoderConfig::validate() const {
  if (mlp_channels.empty()) throw ConfigError("encoder.mlp_channels must be nonempty");
  for (int c : mlp_channels) {
    if (c <= 0) throw ConfigError("encoder.mlp_channels must be positive");
  }
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"kind", encoder_name(c.kind)},
       {"mlp_channels", c.mlp_channels},
       {"centroid_offsets", c.centroid_offsets},
       {"center_offsets", c.center_offsets}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  const std::string w = "encoder";
  json_util::check_keys(j, {"kind", "mlp_channels", "centroid_offsets", "center_offsets"}, w);
  c.kind = parse_encoder(json_util::get<std::string>(j, "kind", w));
  c.mlp_channels = json_util::get_or<std::vector<int>>(j, "mlp_channels", c.mlp_channels, w);
  c.centroid_offsets = json_util::get_or<bool>(j, "centroid_offsets", true, w);
  c.center_offsets = json_util::get_or<bool>(j, "center_offsets", true, w);
  c.validate();
}

FeatureMatrix mlp_forward(const FeatureMatrix& x, std::span<const Linear> layers) {
  FeatureMatrix cur = x;
  std::vector<double> acc;
  for (const Linear& l : layers) {
    if (l.cin != cur.cols) throw ValidationError("mlp: layer input width does not match features");
    FeatureMatrix next(cur.rows, l.cout);
    acc.resize(static_cast<size_t>(l.cout));
    for (size_t i = 0; i < cur.rows; ++i) {
      const auto in = cur.row(i);
      for (int o = 0; o < l.cout; ++o) {
        double s = l.bias[o];
        const float* wrow = l.weight.data() + static_cast<size_t>(o) * l.cin;
        for (int c = 0; c < l.cin; ++c) s += static_cast<double>(wrow[c]) * in[c];
        next.data[i * l.cout + o] = s > 0.0 ? static_cast<float>(s) : 0.f;
      }
    }
    cur = std::move(next);
  }
  return cur;
}

std::vector<int64_t> assign_cells(const PointCloud& cloud, const GridSpec& spec) {
  std::vector<int64_t> out(cloud.size(), kOutside);
  for (size_t i = 0; i < cloud.size(); ++i) {
    const Point& p = cloud.points[i];
    if (const auto c = spec.cell_of(p.x, p.y, p.z)) out[i] = spec.linear_index(*c);
  }
  return out;
}

FeatureMatrix decorate_points(const PointCloud& cloud, std::span<const int64_t> cells,
                              const GridSpec& spec, const EncoderConfig& config) {
  if (cells.size() != cloud.size()) throw ValidationError("decorate: cell ids do not match cloud");
  const int dims = config.decorated_dims(spec);
  FeatureMatrix out(cloud.size(), dims);

  // Group members per cell for centroids.
  std::vector<size_t> order;
  order.reserve(cloud.size());
  for (size_t i = 0; i < cloud.size(); ++i) {
    if (cells[i] != kOutside) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return cells[a] < cells[b]; });

  std::array<std::vector<double>, 3> buf;
  size_t begin = 0;
  while (begin < order.size()) {
    size_t end = begin;
    while (end < order.size() && cells[order[end]] == cells[order[begin]]) ++end;
    std::array<double, 3> centroid{0, 0, 0};
    if (config.centroid_offsets) {
      for (auto& b : buf) b.clear();
      for (size_t k = begin; k < end; ++k) {
        const Point& p = cloud.points[order[k]];
        buf[0].push_back(p.x);
        buf[1].push_back(p.y);
        buf[2].push_back(p.z);
      }
      const double n = static_cast<double>(end - begin);
      for (int a = 0; a < 3; ++a) centroid[a] = canonical_sum(buf[a]) / n;
    }
    const Coord cc = coord_of(cells[order[begin]], spec);
    // View-space cell center along axis 0, 1 (and 2 for voxels).
    const std::array<double, 3> center{spec.axes[0].cell_center(cc[2]), spec.axes[1].cell_center(cc[1]),
                                       spec.rank() == 3 ? spec.axes[2].cell_center(cc[0]) : 0.0};
    for (size_t k = begin; k < end; ++k) {
      const size_t i = order[k];
      const Point& p = cloud.points[i];
      auto row = out.row(i);
      int c = 0;
      row[c++] = p.x;
      row[c++] = p.y;
      row[c++] = p.z;
      row[c++] = p.intensity;
      row[c++] = p.dt;
      if (config.centroid_offsets) {
        row[c++] = static_cast<float>(p.x - centroid[0]);
        row[c++] = static_cast<float>(p.y - centroid[1]);
        row[c++] = static_cast<float>(p.z - centroid[2]);
      }
      if (config.center_offsets) {
        const auto v = spec.view_coords(p.x, p.y, p.z);
        for (int a = 0; a < spec.rank(); ++a) row[c++] = static_cast<float>(v[a] - center[a]);
      }
    }
    begin = end;
  }
  return out;
}

ScatterResult scatter_max(const FeatureMatrix& point_features, std::span<const int64_t> cells) {
  if (cells.size() != point_features.rows) throw ValidationError("scatter_max: id count mismatch");
  ScatterResult r;
  r.cells.reserve(cells.size());
  for (int64_t c : cells) {
    if (c != kOutside) r.cells.push_back(c);
  }
  std::sort(r.cells.begin(), r.cells.end());
  r.cells.erase(std::unique(r.cells.begin(), r.cells.end()), r.cells.end());
  const int cols = point_features.cols;
  r.features = FeatureMatrix(r.cells.size(), cols);
  std::fill(r.features.data.begin(), r.features.data.end(), -std::numeric_limits<float>::infinity());
  r.slot.assign(cells.size(), -1);
  for (size_t i = 0; i < cells.size(); ++i) {
    if (cells[i] == kOutside) continue;
    const auto s = static_cast<int32_t>(std::lower_bound(r.cells.begin(), r.cells.end(), cells[i]) - r.cells.begin());
    r.slot[i] = s;
    auto dst = r.features.row(static_cast<size_t>(s));
    const auto src = point_features.row(i);
    for (int c = 0; c < cols; ++c) dst[c] = std::max(dst[c], src[c]);
  }
  return r;
}

FeatureMatrix gather_rows(const ScatterResult& pooled, size_t num_points) {
  FeatureMatrix out(num_points, pooled.features.cols);
  for (size_t i = 0; i < num_points; ++i) {
    if (pooled.slot[i] < 0) continue;
    const auto src = pooled.features.row(static_cast<size_t>(pooled.slot[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

SparseTensor cells_to_sparse(const ScatterResult& pooled, const GridSpec& spec) {
  SparseTensor st;
  st.rank = spec.rank();
  st.dims = spec.spatial_dims();
  st.channels = pooled.features.cols;
  st.stride = 1;
  st.coords.reserve(pooled.cells.size());
  for (int64_t id : pooled.cells) st.coords.push_back(coord_of(id, spec));
  st.features = pooled.features.data;
  return st;
}

SparseTensor pillar_encode(const PointCloud& cloud, const GridSpec& spec, const EncoderConfig& config,
                           const EncoderWeights& weights) {
  if (spec.view != GridView::kCartesian2D) throw ConfigError("pillar encoder needs a cartesian2d grid");
  return encode_cartesian(cloud, spec, config, weights);
}

SparseTensor voxel_encode(const PointCloud& cloud, const GridSpec& spec, const EncoderConfig& config,
                          const EncoderWeights& weights) {
  if (spec.view != GridView::kCartesian3D) throw ConfigError("voxel encoder needs a cartesian3d grid");
  return encode_cartesian(cloud, spec, config, weights);
}

SparseTensor mvf_encode(const PointCloud& cloud, const GridSpec& pillar_spec,
                        const GridSpec& cyl_spec, const EncoderConfig& config,
                        const EncoderWeights& weights, MvfTrace* trace) {
  if (pillar_spec.view != GridView::kCartesian2D) throw ConfigError("mvf needs a cartesian2d pillar grid");
  if (cyl_spec.view != GridView::kCylindrical) throw ConfigError("mvf needs a cylindrical grid");
  pillar_spec.validate();
  cyl_spec.validate();
  config.validate();
  const int pillar_dims = config.decorated_dims(pillar_spec);
  check_weights(weights.mlp, pillar_dims, "encoder.mlp");
  check_weights(weights.cyl_mlp, config.decorated_dims(cyl_spec), "encoder.cyl_mlp");
  if (weights.fusion.size() != 1) throw ConfigError("encoder.fusion: expected exactly one layer");

  const auto pillar_cells = assign_cells(cloud, pillar_spec);
  auto cyl_cells = assign_cells(cloud, cyl_spec);
  // Only points inside the pillar grid take part, matching pillar_encode.
  for (size_t i = 0; i < cloud.size(); ++i) {
    if (pillar_cells[i] == kOutside) cyl_cells[i] = kOutside;
  }

  const auto pillar_dec = decorate_points(cloud, pillar_cells, pillar_spec, config);
  const auto cyl_dec = decorate_points(cloud, cyl_cells, cyl_spec, config);
  const auto pillar_view = gather_rows(scatter_max(mlp_forward(pillar_dec, weights.mlp), pillar_cells), cloud.size());
  const auto cyl_view = gather_rows(scatter_max(mlp_forward(cyl_dec, weights.cyl_mlp), cyl_cells), cloud.size());

  const int fused_in = pillar_dims + pillar_view.cols + cyl_view.cols;
  check_weights(weights.fusion, fused_in, "encoder.fusion");
  FeatureMatrix fused_input(cloud.size(), fused_in);
  for (size_t i = 0; i < cloud.size(); ++i) {
    auto dst = fused_input.row(i);
    auto it = std::copy(pillar_dec.row(i).begin(), pillar_dec.row(i).end(), dst.begin());
    it = std::copy(pillar_view.row(i).begin(), pillar_view.row(i).end(), it);
    std::copy(cyl_view.row(i).begin(), cyl_view.row(i).end(), it);
  }
  const auto fused = mlp_forward(fused_input, weights.fusion);
  if (trace) {
    trace->pillar_gathered = pillar_view;
    trace->cyl_gathered = cyl_view;
  }
  return cells_to_sparse(scatter_max(fused, pillar_cells), pillar_spec);
}

}  // namespace griddet
