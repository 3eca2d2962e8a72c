#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "griddet/sparse_ops.hpp"

namespace griddet::testing {

inline ConvWeights random_weights(std::mt19937_64& rng, int rank, int cout, int cin, int k, int stride = 1,
                           int dilation = 1) {
  auto w = ConvWeights::zeros(rank, cout, cin, k, stride, dilation);
  std::normal_distribution<float> n;
  for (auto& v : w.kernel) v = n(rng);
  for (auto& v : w.bias) v = n(rng);
  return w;
}

// Random sparse tensor with the given site density.
inline SparseTensor random_sparse(std::mt19937_64& rng, int rank, Coord dims, int channels, double density) {
  std::bernoulli_distribution keep(density);
  std::normal_distribution<float> n;
  std::vector<Coord> coords;
  for (int32_t d = 0; d < dims[0]; ++d) {
    for (int32_t r = 0; r < dims[1]; ++r) {
      for (int32_t q = 0; q < dims[2]; ++q) {
        if (keep(rng)) coords.push_back({d, r, q});
      }
    }
  }
  std::shuffle(coords.begin(), coords.end(), rng);
  std::vector<float> f(coords.size() * static_cast<size_t>(channels));
  for (auto& v : f) v = n(rng);
  return make_sparse(rank, dims, channels, coords, f);
}

inline DenseTensor random_dense(std::mt19937_64& rng, int channels, Coord dims, int rank = 2) {
  DenseTensor x(channels, dims, rank);
  std::normal_distribution<float> n;
  for (auto& v : x.values) v = n(rng);
  return x;
}

// Direct nested-loop cross-correlation with zero padding (k-1)/2*dilation.
inline DenseTensor naive_conv(const DenseTensor& x, const ConvWeights& w) {
  const bool r3 = x.rank == 3;
  const int pad = (w.k - 1) / 2 * w.dilation;
  auto out_dim = [&](int in) { return (in + 2 * pad - w.dilation * (w.k - 1) - 1) / w.stride + 1; };
  const Coord od{r3 ? out_dim(x.dims[0]) : 1, out_dim(x.dims[1]), out_dim(x.dims[2])};
  DenseTensor y(w.cout, od, x.rank);
  const int kd = r3 ? w.k : 1;
  for (int co = 0; co < w.cout; ++co) {
    for (int d = 0; d < od[0]; ++d) {
      for (int r = 0; r < od[1]; ++r) {
        for (int q = 0; q < od[2]; ++q) {
          double s = w.bias[co];
          for (int ci = 0; ci < w.cin; ++ci) {
            for (int td = 0; td < kd; ++td) {
              for (int tr = 0; tr < w.k; ++tr) {
                for (int tq = 0; tq < w.k; ++tq) {
                  const int id = r3 ? d * w.stride - pad + td * w.dilation : 0;
                  const int ir = r * w.stride - pad + tr * w.dilation;
                  const int iq = q * w.stride - pad + tq * w.dilation;
                  if (id < 0 || ir < 0 || iq < 0 || id >= x.dims[0] || ir >= x.dims[1] || iq >= x.dims[2]) continue;
                  const int tap = (td * w.k + tr) * w.k + tq;
                  s += static_cast<double>(w.w(co, ci, tap)) * x.at(ci, id, ir, iq);
                }
              }
            }
          }
          y.at(co, d, r, q) = static_cast<float>(s);
        }
      }
    }
  }
  return y;
}

// Features of `dense` sampled at the coordinates of `sites`.
inline std::vector<float> sample(const DenseTensor& dense, const SparseTensor& sites) {
  std::vector<float> out;
  for (const auto& c : sites.coords) {
    for (int ch = 0; ch < dense.channels; ++ch) out.push_back(dense.at(ch, c[0], c[1], c[2]));
  }
  return out;
}

// ||a - b|| / ||b||, with the denominator floored at 1e-12.
inline double relative_l2(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) return INFINITY;
  double num = 0, den = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    num += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
    den += double(b[i]) * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

// Active sites a strided conv must produce: every output whose window covers
// an input site.
inline std::vector<Coord> strided_sites(const SparseTensor& x, const ConvWeights& w) {
  const bool r3 = x.rank == 3;
  const int pad = (w.k - 1) / 2 * w.dilation;
  auto out_dim = [&](int in) { return (in + 2 * pad - w.dilation * (w.k - 1) - 1) / w.stride + 1; };
  const Coord od{r3 ? out_dim(x.dims[0]) : 1, out_dim(x.dims[1]), out_dim(x.dims[2])};
  std::vector<Coord> set;
  for (const auto& c : x.coords) {
    for (int d = 0; d < od[0]; ++d) {
      for (int r = 0; r < od[1]; ++r) {
        for (int q = 0; q < od[2]; ++q) {
          auto covers = [&](int o, int i) {
            const int t = i - (o * w.stride - pad);
            return t >= 0 && t % w.dilation == 0 && t / w.dilation < w.k;
          };
          if ((!r3 || covers(d, c[0])) && covers(r, c[1]) && covers(q, c[2])) set.push_back({d, r, q});
        }
      }
    }
  }
  std::sort(set.begin(), set.end());
  set.erase(std::unique(set.begin(), set.end()), set.end());
  return set;
}

#ifdef DOCTEST_LIBRARY_INCLUDED
inline void check_close(std::span<const float> a, std::span<const float> b, double rel) {
  REQUIRE(a.size() == b.size());
  CHECK(relative_l2(a, b) <= rel);
}
#endif

}  // namespace griddet::testing
