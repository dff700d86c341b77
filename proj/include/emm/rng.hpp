// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace emm {

/// Deterministic counter-based PRNG (splitmix64). Every random draw in the
/// project flows through one of these streams so that runs are reproducible
/// bit-for-bit across platforms; no <random> distributions are used because
/// their output is implementation-defined.
class RandomStream {
public:
  explicit RandomStream(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 bits of mantissa.
  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Uniform integer in [0, n). n must be positive.
  uint64_t uniform_index(uint64_t n) { return next_u64() % n; }

  /// Standard normal via Box-Muller. Draws two uniforms per call.
  double normal() {
    double u1 = uniform01();
    double u2 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  /// In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    if (items.size() < 2) return;
    for (size_t i = items.size() - 1; i > 0; --i) {
      size_t j = static_cast<size_t>(uniform_index(i + 1));
      std::swap(items[i], items[j]);
    }
  }

private:
  uint64_t state_;
};

/// FNV-1a, used to derive per-parameter seed streams from stable string ids.
inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Stream keyed by (seed, id): independent parameters get independent draws
/// regardless of creation order.
inline RandomStream stream_for(uint64_t seed, std::string_view id) {
  return RandomStream(seed ^ fnv1a64(id));
}

}  // namespace emm
