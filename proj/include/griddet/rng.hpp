#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace griddet {

// Counter-based generator: every draw is a pure function of
// (seed, stream, counter), so weights do not depend on construction order.
class CounterRng {
 public:
  CounterRng(uint64_t seed, uint64_t stream) : key_(mix(seed ^ mix(stream + 0x632BE59BD9B4E019ULL))) {}

  static uint64_t mix(uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  uint64_t bits(uint64_t counter) const { return mix(key_ ^ mix(counter)); }

  // Uniform in the open interval (0, 1).
  double uniform(uint64_t counter) const {
    return (static_cast<double>(bits(counter) >> 11) + 0.5) * 0x1.0p-53;
  }

  double normal(uint64_t counter) const {
    const double u1 = uniform(2 * counter);
    const double u2 = uniform(2 * counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  uint64_t key_;
};

// Sequential view over a CounterRng for code that draws a variable
// number of values.
class RngStream {
 public:
  RngStream(uint64_t seed, uint64_t stream) : rng_(seed, stream) {}

  double uniform() { return rng_.uniform(next_++); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() { return rng_.normal(next_++); }
  bool bernoulli(double p) { return uniform() < p; }
  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return n == 0 ? 0 : rng_.bits(next_++) % n; }

 private:
  CounterRng rng_;
  uint64_t next_ = 0;
};

// Stable 64-bit hash for deriving per-layer streams from names.
inline uint64_t hash_name(const char* s) {
  uint64_t h = 1469598103934665603ULL;
  for (; *s; ++s) {
    h ^= static_cast<unsigned char>(*s);
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace griddet
