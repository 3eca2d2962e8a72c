#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace griddet {

// Spatial coordinate as (depth, row, col). Rank-2 tensors keep depth = 0 and
// an extent of 1, so 2D and 3D kernels share one code path.
using Coord = std::array<int32_t, 3>;

// COO feature map with unique, lexicographically sorted coordinates.
struct SparseTensor {
  int rank = 2;
  Coord dims{1, 1, 1};
  int channels = 0;
  int stride = 1;  // downsampling factor relative to the encoder grid
  std::vector<Coord> coords;
  std::vector<float> features;  // coords.size() x channels, row-major

  size_t size() const { return coords.size(); }
  bool empty() const { return coords.empty(); }
  std::span<const float> row(size_t i) const {
    return {features.data() + i * channels, static_cast<size_t>(channels)};
  }
  std::span<float> row(size_t i) {
    return {features.data() + i * channels, static_cast<size_t>(channels)};
  }
  int64_t linear(const Coord& c) const {
    return (static_cast<int64_t>(c[0]) * dims[1] + c[1]) * dims[2] + c[2];
  }
  void validate() const;
};

// Dense map with shape (channels, depth, rows, cols).
struct DenseTensor {
  int rank = 2;
  int channels = 0;
  Coord dims{1, 1, 1};
  int stride = 1;
  std::vector<float> values;

  DenseTensor() = default;
  DenseTensor(int channels, Coord dims, int rank = 2, int stride = 1);

  int64_t plane() const { return static_cast<int64_t>(dims[0]) * dims[1] * dims[2]; }
  float& at(int c, int d, int r, int col) {
    return values[static_cast<size_t>(((static_cast<int64_t>(c) * dims[0] + d) * dims[1] + r) * dims[2] + col)];
  }
  float at(int c, int d, int r, int col) const {
    return values[static_cast<size_t>(((static_cast<int64_t>(c) * dims[0] + d) * dims[1] + r) * dims[2] + col)];
  }
  float& at(int c, int r, int col) { return at(c, 0, r, col); }
  float at(int c, int r, int col) const { return at(c, 0, r, col); }
  void validate() const;
};

// Convolution kernel laid out as (cout, cin, k[, k], k) with an odd kernel
// size. Transposed 2x upsampling kernels use k = 2 instead.
struct ConvWeights {
  int rank = 2;
  int cout = 0;
  int cin = 0;
  int k = 3;
  int stride = 1;
  int dilation = 1;
  std::vector<float> kernel;
  std::vector<float> bias;

  static ConvWeights zeros(int rank, int cout, int cin, int k, int stride = 1, int dilation = 1);
  int taps() const { return rank == 3 ? k * k * k : k * k; }
  float& w(int co, int ci, int tap) {
    return kernel[(static_cast<size_t>(co) * cin + ci) * taps() + tap];
  }
  float w(int co, int ci, int tap) const {
    return kernel[(static_cast<size_t>(co) * cin + ci) * taps() + tap];
  }
  size_t num_params() const { return kernel.size() + bias.size(); }
  void validate() const;
};

// Number of (input tap, output site) products actually accumulated,
// the basis for sparse FLOP counting.
struct ConvStats {
  int64_t pairs = 0;
};

// Output dims of a padded convolution along one axis.
int32_t conv_out_dim(int32_t in, int k, int stride, int dilation);

SparseTensor submanifold_conv(const SparseTensor& x, const ConvWeights& w, ConvStats* stats = nullptr);
SparseTensor sparse_conv_strided(const SparseTensor& x, const ConvWeights& w,
                                 ConvStats* stats = nullptr);
// Sites of the strided output whose window touches any active input.
std::vector<Coord> strided_active_set(const SparseTensor& x, int k, int stride, int dilation);

DenseTensor dense_conv(const DenseTensor& x, const ConvWeights& w);
DenseTensor transposed_conv2x(const DenseTensor& x, const ConvWeights& w);

DenseTensor to_dense(const SparseTensor& x);
// Sparsify at an explicit site list (sorted internally).
SparseTensor to_sparse(const DenseTensor& x, std::span<const Coord> sites);
// Sparsify at every site with any nonzero channel.
SparseTensor to_sparse(const DenseTensor& x);
// Rank-3 to rank-2 by concatenating depth slices: channel c*depth + z.
SparseTensor collapse_height(const SparseTensor& x);

// Builds a tensor from unsorted rows; duplicate coordinates are rejected.
SparseTensor make_sparse(int rank, Coord dims, int channels, std::vector<Coord> coords,
                         std::vector<float> features, int stride = 1);

// Elementwise helpers shared by the network executor.
void relu_inplace(std::span<float> v);
void affine_inplace(std::vector<float>& values, int channels, int64_t plane_or_rows,
                    std::span<const float> scale, std::span<const float> shift, bool channel_major);
SparseTensor add(const SparseTensor& a, const SparseTensor& b);
DenseTensor add(const DenseTensor& a, const DenseTensor& b);
DenseTensor concat_channels(std::span<const DenseTensor* const> parts);
DenseTensor weighted_sum(std::span<const DenseTensor* const> parts, std::span<const double> weights);
// Nearest-neighbor 2x upsampling cropped to `target` spatial dims.
DenseTensor upsample_nearest2x(const DenseTensor& x, Coord target);
// 3x3 max pooling, stride 2, padding 1 (rank 2).
DenseTensor max_pool_down2(const DenseTensor& x);

}  // namespace griddet
