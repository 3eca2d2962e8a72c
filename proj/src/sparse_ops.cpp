#include "griddet/sparse_ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_map>
#include <unordered_set>

#include <Eigen/Core>

#include "griddet/error.hpp"

namespace griddet {

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct KernelGeom {
  std::array<int, 3> k{1, 1, 1};  // per axis (depth, row, col)
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> dil{1, 1, 1};
  std::array<int, 3> pad{0, 0, 0};
  int taps = 1;

  KernelGeom(int rank, int ksize, int s, int d) {
    for (int a = (rank == 3 ? 0 : 1); a < 3; ++a) {
      k[a] = ksize;
      stride[a] = s;
      dil[a] = d;
      pad[a] = (ksize - 1) / 2 * d;
    }
    taps = k[0] * k[1] * k[2];
  }

  Coord tap_offset(int t) const {
    return {t / (k[1] * k[2]), (t / k[2]) % k[1], t % k[2]};
  }

  Coord out_dims(const Coord& in) const {
    return {conv_out_dim(in[0], k[0], stride[0], dil[0]), conv_out_dim(in[1], k[1], stride[1], dil[1]),
            conv_out_dim(in[2], k[2], stride[2], dil[2])};
  }

  // Input coordinate read by output site o through tap t.
  Coord input_of(const Coord& o, const Coord& t) const {
    return {o[0] * stride[0] - pad[0] + t[0] * dil[0], o[1] * stride[1] - pad[1] + t[1] * dil[1],
            o[2] * stride[2] - pad[2] + t[2] * dil[2]};
  }
};

bool in_bounds(const Coord& c, const Coord& dims) {
  return c[0] >= 0 && c[1] >= 0 && c[2] >= 0 && c[0] < dims[0] && c[1] < dims[1] && c[2] < dims[2];
}

void check_channels(int have, const ConvWeights& w, const char* op) {
  if (have != w.cin) {
    throw ValidationError(std::string(op) + ": input has " + std::to_string(have) +
                          " channels, kernel expects " + std::to_string(w.cin));
  }
}

// Sparse conv over a neighbor table nbr[o * taps + t] (input row or -1).
// Dense tables use one im2col GEMM over all taps; sparse ones gather per tap
// and accumulate bias then taps in ascending order. Both run in double and
// the path depends only on the input, so results are reproducible.
SparseTensor run_sparse_conv(const SparseTensor& x, const ConvWeights& w, const KernelGeom& g,
                             std::vector<Coord> out_coords, Coord out_dims, int out_stride,
                             ConvStats* stats) {
  SparseTensor out;
  out.rank = x.rank;
  out.dims = out_dims;
  out.channels = w.cout;
  out.stride = out_stride;
  out.coords = std::move(out_coords);
  const size_t n_out = out.coords.size();
  const auto taps = static_cast<size_t>(g.taps);

  std::unordered_map<int64_t, int32_t> index;
  index.reserve(x.size() * 2);
  for (size_t i = 0; i < x.size(); ++i) index.emplace(x.linear(x.coords[i]), static_cast<int32_t>(i));

  std::vector<int32_t> nbr(n_out * taps, -1);
  int64_t pairs = 0;
  for (size_t t = 0; t < taps; ++t) {
    const Coord toff = g.tap_offset(static_cast<int>(t));
    for (size_t o = 0; o < n_out; ++o) {
      const Coord ic = g.input_of(out.coords[o], toff);
      if (!in_bounds(ic, x.dims)) continue;
      const auto it = index.find(x.linear(ic));
      if (it == index.end()) continue;
      nbr[o * taps + t] = it->second;
      ++pairs;
    }
  }
  if (stats) stats->pairs += pairs;
  out.features.resize(n_out * static_cast<size_t>(w.cout));
  if (n_out == 0) return out;

  const bool fused = static_cast<double>(pairs) >= 0.3 * static_cast<double>(n_out * taps);
  if (fused) {
    const int k_dim = g.taps * w.cin;
    MatD wf(k_dim, w.cout);
    for (int t = 0; t < g.taps; ++t) {
      for (int ci = 0; ci < w.cin; ++ci) {
        for (int co = 0; co < w.cout; ++co) wf(t * w.cin + ci, co) = w.w(co, ci, t);
      }
    }
    const size_t tile = std::clamp<size_t>((size_t{1} << 21) / static_cast<size_t>(k_dim), 32, 8192);
    MatD cols;
    MatD prod;
    for (size_t start = 0; start < n_out; start += tile) {
      const size_t count = std::min(tile, n_out - start);
      cols.resize(static_cast<Eigen::Index>(count), k_dim);
      for (size_t j = 0; j < count; ++j) {
        double* dst = cols.row(static_cast<Eigen::Index>(j)).data();
        for (size_t t = 0; t < taps; ++t, dst += w.cin) {
          const int32_t r = nbr[(start + j) * taps + t];
          if (r < 0) {
            std::fill(dst, dst + w.cin, 0.0);
            continue;
          }
          const float* src = x.features.data() + static_cast<size_t>(r) * x.channels;
          for (int ci = 0; ci < w.cin; ++ci) dst[ci] = src[ci];
        }
      }
      prod.noalias() = cols * wf;
      for (size_t j = 0; j < count; ++j) {
        float* dst = out.features.data() + (start + j) * w.cout;
        for (int co = 0; co < w.cout; ++co) {
          dst[co] = static_cast<float>(w.bias[co] + prod(static_cast<Eigen::Index>(j), co));
        }
      }
    }
    return out;
  }

  MatD acc(static_cast<Eigen::Index>(n_out), w.cout);
  for (Eigen::Index r = 0; r < acc.rows(); ++r) {
    for (int co = 0; co < w.cout; ++co) acc(r, co) = w.bias[co];
  }
  std::vector<int32_t> in_rows;
  std::vector<int32_t> out_rows;
  MatD wt(w.cin, w.cout);
  MatD gathered;
  MatD prod;
  for (size_t t = 0; t < taps; ++t) {
    in_rows.clear();
    out_rows.clear();
    for (size_t o = 0; o < n_out; ++o) {
      const int32_t r = nbr[o * taps + t];
      if (r < 0) continue;
      in_rows.push_back(r);
      out_rows.push_back(static_cast<int32_t>(o));
    }
    if (in_rows.empty()) continue;
    for (int co = 0; co < w.cout; ++co) {
      for (int ci = 0; ci < w.cin; ++ci) wt(ci, co) = w.w(co, ci, static_cast<int>(t));
    }
    gathered.resize(static_cast<Eigen::Index>(in_rows.size()), w.cin);
    for (size_t p = 0; p < in_rows.size(); ++p) {
      const float* src = x.features.data() + static_cast<size_t>(in_rows[p]) * x.channels;
      for (int ci = 0; ci < w.cin; ++ci) gathered(static_cast<Eigen::Index>(p), ci) = src[ci];
    }
    prod.noalias() = gathered * wt;
    for (size_t p = 0; p < out_rows.size(); ++p) {
      acc.row(out_rows[p]) += prod.row(static_cast<Eigen::Index>(p));
    }
  }
  for (size_t o = 0; o < n_out; ++o) {
    for (int co = 0; co < w.cout; ++co) {
      out.features[o * w.cout + co] = static_cast<float>(acc(static_cast<Eigen::Index>(o), co));
    }
  }
  return out;
}

}  // namespace

DenseTensor::DenseTensor(int channels_, Coord dims_, int rank_, int stride_)
    : rank(rank_), channels(channels_), dims(dims_), stride(stride_),
      values(static_cast<size_t>(channels_) * dims_[0] * dims_[1] * dims_[2], 0.f) {}

void SparseTensor::validate() const {
  if (rank != 2 && rank != 3) throw InvariantError("sparse tensor rank must be 2 or 3");
  if (rank == 2 && dims[0] != 1) throw InvariantError("rank-2 sparse tensor must have depth 1");
  if (features.size() != coords.size() * static_cast<size_t>(channels)) {
    throw InvariantError("sparse tensor feature rows do not match coordinate count");
  }
  for (size_t i = 0; i < coords.size(); ++i) {
    if (!in_bounds(coords[i], dims)) throw InvariantError("sparse coordinate out of range");
    if (i > 0 && !(coords[i - 1] < coords[i])) {
      throw InvariantError("sparse coordinates not unique and sorted");
    }
  }
}

void DenseTensor::validate() const {
  if (values.size() != static_cast<size_t>(channels) * plane()) {
    throw InvariantError("dense tensor size does not match its shape");
  }
  for (float v : values) {
    if (!std::isfinite(v)) throw InvariantError("dense tensor holds a non-finite value");
  }
}

ConvWeights ConvWeights::zeros(int rank, int cout, int cin, int k, int stride, int dilation) {
  ConvWeights w;
  w.rank = rank;
  w.cout = cout;
  w.cin = cin;
  w.k = k;
  w.stride = stride;
  w.dilation = dilation;
  w.kernel.assign(static_cast<size_t>(cout) * cin * w.taps(), 0.f);
  w.bias.assign(static_cast<size_t>(cout), 0.f);
  return w;
}

void ConvWeights::validate() const {
  if (rank != 2 && rank != 3) throw ValidationError("conv rank must be 2 or 3");
  if (k < 1 || k % 2 == 0) throw ValidationError("conv kernel size must be odd");
  if (stride != 1 && stride != 2) throw ValidationError("conv stride must be 1 or 2");
  if (dilation < 1) throw ValidationError("conv dilation must be >= 1");
  if (kernel.size() != static_cast<size_t>(cout) * cin * taps() || bias.size() != static_cast<size_t>(cout)) {
    throw ValidationError("conv weight buffers do not match declared shape");
  }
}

int32_t conv_out_dim(int32_t in, int k, int stride, int dilation) {
  const int pad = (k - 1) / 2 * dilation;
  return (in + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
}

SparseTensor submanifold_conv(const SparseTensor& x, const ConvWeights& w, ConvStats* stats) {
  w.validate();
  if (w.stride != 1) throw ValidationError("submanifold conv requires stride 1");
  if (w.rank != x.rank) throw ValidationError("submanifold conv: rank mismatch");
  check_channels(x.channels, w, "submanifold conv");
  const KernelGeom g(x.rank, w.k, 1, w.dilation);
  return run_sparse_conv(x, w, g, x.coords, x.dims, x.stride, stats);
}

std::vector<Coord> strided_active_set(const SparseTensor& x, int k, int stride, int dilation) {
  const KernelGeom g(x.rank, k, stride, dilation);
  const Coord od = g.out_dims(x.dims);
  std::unordered_set<int64_t> seen;
  std::vector<Coord> out;
  std::array<std::vector<int32_t>, 3> cand;
  for (const Coord& c : x.coords) {
    for (int a = 0; a < 3; ++a) {
      cand[a].clear();
      for (int t = 0; t < g.k[a]; ++t) {
        const int32_t num = c[a] + g.pad[a] - t * g.dil[a];
        if (num < 0 || num % g.stride[a] != 0) continue;
        const int32_t o = num / g.stride[a];
        if (o < od[a]) cand[a].push_back(o);
      }
    }
    for (int32_t d : cand[0]) {
      for (int32_t r : cand[1]) {
        for (int32_t q : cand[2]) {
          const int64_t key = (static_cast<int64_t>(d) * od[1] + r) * od[2] + q;
          if (seen.insert(key).second) out.push_back({d, r, q});
        }
      }
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

SparseTensor sparse_conv_strided(const SparseTensor& x, const ConvWeights& w, ConvStats* stats) {
  w.validate();
  if (w.stride != 2) throw ValidationError("strided sparse conv requires stride 2");
  if (w.rank != x.rank) throw ValidationError("strided sparse conv: rank mismatch");
  check_channels(x.channels, w, "strided sparse conv");
  const KernelGeom g(x.rank, w.k, w.stride, w.dilation);
  auto coords = strided_active_set(x, w.k, w.stride, w.dilation);
  return run_sparse_conv(x, w, g, std::move(coords), g.out_dims(x.dims), x.stride * 2, stats);
}

DenseTensor dense_conv(const DenseTensor& x, const ConvWeights& w) {
  w.validate();
  if (w.rank != x.rank) throw ValidationError("dense conv: rank mismatch");
  check_channels(x.channels, w, "dense conv");
  const KernelGeom g(x.rank, w.k, w.stride, w.dilation);
  const Coord od = g.out_dims(x.dims);
  if (od[0] < 1 || od[1] < 1 || od[2] < 1) throw ValidationError("dense conv: input smaller than kernel");
  DenseTensor out(w.cout, od, x.rank, x.stride * w.stride);

  const int rows = w.cin * g.taps;
  const MatD wm = Eigen::Map<const MatF>(w.kernel.data(), w.cout, rows).cast<double>();
  const int64_t n_pix = out.plane();
  const int64_t in_plane = x.plane();
  const int64_t tile = std::clamp<int64_t>((int64_t{1} << 22) / std::max(rows, 1), 32, 4096);

  std::vector<Coord> tile_coords;
  std::vector<std::array<int32_t, 3>> taps(static_cast<size_t>(g.taps));
  for (int t = 0; t < g.taps; ++t) taps[t] = g.tap_offset(t);

  MatD cols;
  MatD prod;
  std::vector<int64_t> offsets;
  for (int64_t start = 0; start < n_pix; start += tile) {
    const int64_t count = std::min(tile, n_pix - start);
    tile_coords.resize(static_cast<size_t>(count));
    for (int64_t j = 0; j < count; ++j) {
      const int64_t p = start + j;
      tile_coords[j] = {static_cast<int32_t>(p / (od[1] * od[2])), static_cast<int32_t>((p / od[2]) % od[1]),
                        static_cast<int32_t>(p % od[2])};
    }
    cols.resize(rows, count);
    offsets.resize(static_cast<size_t>(count));
    for (int t = 0; t < g.taps; ++t) {
      for (int64_t j = 0; j < count; ++j) {
        const Coord ic = g.input_of(tile_coords[j], taps[t]);
        offsets[j] = in_bounds(ic, x.dims) ? (static_cast<int64_t>(ic[0]) * x.dims[1] + ic[1]) * x.dims[2] + ic[2] : -1;
      }
      for (int ci = 0; ci < w.cin; ++ci) {
        const float* src = x.values.data() + ci * in_plane;
        double* dst = cols.row(ci * g.taps + t).data();
        for (int64_t j = 0; j < count; ++j) dst[j] = offsets[j] >= 0 ? src[offsets[j]] : 0.0;
      }
    }
    prod.noalias() = wm * cols;
    for (int co = 0; co < w.cout; ++co) {
      float* dst = out.values.data() + co * n_pix + start;
      const double b = w.bias[co];
      for (int64_t j = 0; j < count; ++j) dst[j] = static_cast<float>(prod(co, j) + b);
    }
  }
  return out;
}

DenseTensor transposed_conv2x(const DenseTensor& x, const ConvWeights& w) {
  if (x.rank != 2 || w.rank != 2) throw ValidationError("transposed conv supports rank 2 only");
  if (w.k != 2) throw ValidationError("transposed 2x conv requires a 2x2 kernel");
  if (w.kernel.size() != static_cast<size_t>(w.cout) * w.cin * 4 || w.bias.size() != static_cast<size_t>(w.cout)) {
    throw ValidationError("transposed conv weight buffers do not match declared shape");
  }
  check_channels(x.channels, w, "transposed conv");
  const int32_t h = x.dims[1];
  const int32_t wd = x.dims[2];
  DenseTensor out(w.cout, {1, 2 * h, 2 * wd}, 2, std::max(1, x.stride / 2));
  const int64_t hw = static_cast<int64_t>(h) * wd;
  const MatD xin = Eigen::Map<const MatF>(x.values.data(), x.channels, hw).cast<double>();
  MatD wt(w.cout, w.cin);
  for (int tap = 0; tap < 4; ++tap) {
    const int a = tap / 2;
    const int b = tap % 2;
    for (int co = 0; co < w.cout; ++co) {
      for (int ci = 0; ci < w.cin; ++ci) wt(co, ci) = w.w(co, ci, tap);
    }
    const MatD y = wt * xin;
    for (int co = 0; co < w.cout; ++co) {
      const double bias = w.bias[co];
      for (int32_t r = 0; r < h; ++r) {
        for (int32_t c = 0; c < wd; ++c) {
          out.at(co, 2 * r + a, 2 * c + b) = static_cast<float>(y(co, static_cast<int64_t>(r) * wd + c) + bias);
        }
      }
    }
  }
  return out;
}

DenseTensor to_dense(const SparseTensor& x) {
  DenseTensor out(x.channels, x.dims, x.rank, x.stride);
  const int64_t plane = out.plane();
  for (size_t i = 0; i < x.size(); ++i) {
    const int64_t off = x.linear(x.coords[i]);
    for (int c = 0; c < x.channels; ++c) {
      out.values[static_cast<size_t>(c * plane + off)] = x.features[i * x.channels + c];
    }
  }
  return out;
}

SparseTensor to_sparse(const DenseTensor& x, std::span<const Coord> sites) {
  std::vector<Coord> coords(sites.begin(), sites.end());
  std::sort(coords.begin(), coords.end());
  coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
  SparseTensor out;
  out.rank = x.rank;
  out.dims = x.dims;
  out.channels = x.channels;
  out.stride = x.stride;
  out.features.resize(coords.size() * static_cast<size_t>(x.channels));
  for (size_t i = 0; i < coords.size(); ++i) {
    if (!in_bounds(coords[i], x.dims)) throw ValidationError("to_sparse: site out of range");
    for (int c = 0; c < x.channels; ++c) {
      out.features[i * x.channels + c] = x.at(c, coords[i][0], coords[i][1], coords[i][2]);
    }
  }
  out.coords = std::move(coords);
  return out;
}

SparseTensor to_sparse(const DenseTensor& x) {
  std::vector<Coord> sites;
  for (int32_t d = 0; d < x.dims[0]; ++d) {
    for (int32_t r = 0; r < x.dims[1]; ++r) {
      for (int32_t q = 0; q < x.dims[2]; ++q) {
        for (int c = 0; c < x.channels; ++c) {
          if (x.at(c, d, r, q) != 0.f) {
            sites.push_back({d, r, q});
            break;
          }
        }
      }
    }
  }
  return to_sparse(x, sites);
}

SparseTensor collapse_height(const SparseTensor& x) {
  if (x.rank != 3) throw ValidationError("collapse_height expects a rank-3 tensor");
  const int depth = x.dims[0];
  SparseTensor out;
  out.rank = 2;
  out.dims = {1, x.dims[1], x.dims[2]};
  out.channels = x.channels * depth;
  out.stride = x.stride;
  std::vector<std::pair<Coord, size_t>> order;
  order.reserve(x.size());
  for (size_t i = 0; i < x.size(); ++i) order.push_back({Coord{0, x.coords[i][1], x.coords[i][2]}, i});
  std::stable_sort(order.begin(), order.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  for (size_t i = 0; i < order.size(); ++i) {
    const auto& [bev, src] = order[i];
    if (out.coords.empty() || out.coords.back() != bev) {
      out.coords.push_back(bev);
      out.features.resize(out.features.size() + out.channels, 0.f);
    }
    float* dst = out.features.data() + (out.coords.size() - 1) * out.channels;
    const int z = x.coords[src][0];
    for (int c = 0; c < x.channels; ++c) dst[c * depth + z] = x.features[src * x.channels + c];
  }
  return out;
}

SparseTensor make_sparse(int rank, Coord dims, int channels, std::vector<Coord> coords,
                         std::vector<float> features, int stride) {
  if (features.size() != coords.size() * static_cast<size_t>(channels)) {
    throw ValidationError("make_sparse: feature count does not match coordinates");
  }
  std::vector<size_t> perm(coords.size());
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::sort(perm.begin(), perm.end(), [&](size_t a, size_t b) { return coords[a] < coords[b]; });
  SparseTensor out;
  out.rank = rank;
  out.dims = dims;
  out.channels = channels;
  out.stride = stride;
  out.coords.reserve(coords.size());
  out.features.reserve(features.size());
  for (size_t i = 0; i < perm.size(); ++i) {
    if (i > 0 && coords[perm[i]] == coords[perm[i - 1]]) {
      throw ValidationError("make_sparse: duplicate coordinate");
    }
    if (!in_bounds(coords[perm[i]], dims)) throw ValidationError("make_sparse: coordinate out of range");
    out.coords.push_back(coords[perm[i]]);
    out.features.insert(out.features.end(), features.begin() + perm[i] * channels,
                        features.begin() + (perm[i] + 1) * channels);
  }
  return out;
}

void relu_inplace(std::span<float> v) {
  for (float& f : v) f = f > 0.f ? f : 0.f;
}

void affine_inplace(std::vector<float>& values, int channels, int64_t plane_or_rows,
                    std::span<const float> scale, std::span<const float> shift, bool channel_major) {
  if (channel_major) {
    for (int c = 0; c < channels; ++c) {
      float* p = values.data() + c * plane_or_rows;
      for (int64_t i = 0; i < plane_or_rows; ++i) p[i] = p[i] * scale[c] + shift[c];
    }
  } else {
    for (int64_t i = 0; i < plane_or_rows; ++i) {
      float* p = values.data() + i * channels;
      for (int c = 0; c < channels; ++c) p[c] = p[c] * scale[c] + shift[c];
    }
  }
}

SparseTensor add(const SparseTensor& a, const SparseTensor& b) {
  if (a.coords != b.coords || a.channels != b.channels) {
    throw ValidationError("sparse add: operands have different active sets or channels");
  }
  SparseTensor out = a;
  for (size_t i = 0; i < out.features.size(); ++i) out.features[i] += b.features[i];
  return out;
}

DenseTensor add(const DenseTensor& a, const DenseTensor& b) {
  if (a.dims != b.dims || a.channels != b.channels) throw ValidationError("dense add: shape mismatch");
  DenseTensor out = a;
  for (size_t i = 0; i < out.values.size(); ++i) out.values[i] += b.values[i];
  return out;
}

DenseTensor concat_channels(std::span<const DenseTensor* const> parts) {
  if (parts.empty()) throw ValidationError("concat: no inputs");
  int channels = 0;
  for (const auto* p : parts) {
    if (p->dims != parts[0]->dims) throw ValidationError("concat: spatial shape mismatch");
    channels += p->channels;
  }
  DenseTensor out(channels, parts[0]->dims, parts[0]->rank, parts[0]->stride);
  size_t off = 0;
  for (const auto* p : parts) {
    std::copy(p->values.begin(), p->values.end(), out.values.begin() + static_cast<std::ptrdiff_t>(off));
    off += p->values.size();
  }
  return out;
}

DenseTensor weighted_sum(std::span<const DenseTensor* const> parts, std::span<const double> weights) {
  if (parts.empty() || parts.size() != weights.size()) throw ValidationError("weighted_sum: bad arity");
  DenseTensor out(parts[0]->channels, parts[0]->dims, parts[0]->rank, parts[0]->stride);
  std::vector<double> acc(out.values.size(), 0.0);
  for (size_t k = 0; k < parts.size(); ++k) {
    if (parts[k]->dims != out.dims || parts[k]->channels != out.channels) {
      throw ValidationError("weighted_sum: shape mismatch");
    }
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += weights[k] * parts[k]->values[i];
  }
  for (size_t i = 0; i < acc.size(); ++i) out.values[i] = static_cast<float>(acc[i]);
  return out;
}

DenseTensor upsample_nearest2x(const DenseTensor& x, Coord target) {
  if (x.rank != 2) throw ValidationError("upsample supports rank 2 only");
  if (target[1] > 2 * x.dims[1] || target[2] > 2 * x.dims[2]) {
    throw ValidationError("upsample: target larger than 2x input");
  }
  DenseTensor out(x.channels, {1, target[1], target[2]}, 2, std::max(1, x.stride / 2));
  for (int c = 0; c < x.channels; ++c) {
    for (int32_t r = 0; r < target[1]; ++r) {
      for (int32_t q = 0; q < target[2]; ++q) out.at(c, r, q) = x.at(c, r / 2, q / 2);
    }
  }
  return out;
}

DenseTensor max_pool_down2(const DenseTensor& x) {
  if (x.rank != 2) throw ValidationError("max pool supports rank 2 only");
  const Coord od{1, conv_out_dim(x.dims[1], 3, 2, 1), conv_out_dim(x.dims[2], 3, 2, 1)};
  DenseTensor out(x.channels, od, 2, x.stride * 2);
  for (int c = 0; c < x.channels; ++c) {
    for (int32_t r = 0; r < od[1]; ++r) {
      for (int32_t q = 0; q < od[2]; ++q) {
        float m = -std::numeric_limits<float>::infinity();
        for (int dr = -1; dr <= 1; ++dr) {
          for (int dq = -1; dq <= 1; ++dq) {
            const int32_t ir = 2 * r + dr;
            const int32_t iq = 2 * q + dq;
            if (ir < 0 || iq < 0 || ir >= x.dims[1] || iq >= x.dims[2]) continue;
            m = std::max(m, x.at(c, ir, iq));
          }
        }
        out.at(c, r, q) = m;
      }
    }
  }
  return out;
}

}  // namespace griddet
