#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "mvsds/core/common.hpp"

namespace mvsds {

namespace detail {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace detail

// Deterministic random stream. The engine is the standard-specified
// mt19937_64; the uniform/normal transforms are implemented here so that
// sequences are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), eng_(detail::splitmix64(seed)) {}

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    MVSDS_REQUIRE(lo <= hi, "empty integer range [", lo, ", ", hi, "]");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<int64_t>(eng_());  // full 64-bit range
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t v;
    do {
      v = eng_();
    } while (v >= limit);
    return lo + static_cast<int64_t>(v % span);
  }

  // Standard normal via Box-Muller, pairs cached.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

  // Independent stream derived from this stream's seed and a tag. Does not
  // consume state of the parent, so subsystems can be re-derived stably.
  Rng child(std::string_view tag) const {
    return Rng(detail::splitmix64(seed_ ^ detail::fnv1a64(tag)));
  }

  Rng child(uint64_t index) const {
    return Rng(detail::splitmix64(seed_ ^ detail::splitmix64(index + 1)));
  }

 private:
  uint64_t seed_;
  std::mt19937_64 eng_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace mvsds
