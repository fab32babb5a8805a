#pragma once

#include <cmath>
#include <complex>
#include <random>

#include "ewirp/common.hpp"

namespace ewirp {

inline u64 splitmix64(u64 x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Order-sensitive combine for deriving disjoint stream ids from structured keys.
inline u64 mix_streams(u64 a, u64 b) { return splitmix64(a ^ splitmix64(b)); }

template <class... Rest>
u64 mix_streams(u64 a, u64 b, Rest... rest) {
  return mix_streams(mix_streams(a, b), static_cast<u64>(rest)...);
}

inline u64 stream_tag(const char* name) {
  u64 h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (const char* p = name; *p; ++p) h = (h ^ static_cast<u8>(*p)) * 0x100000001b3ULL;
  return h;
}

// Deterministic random stream: identical (seed, stream) always replays the
// same sequence, and distinct streams are statistically independent.
// Distributions are implemented in-house so sequences do not depend on the
// standard library vendor.
class RngStream {
 public:
  RngStream(u64 seed, u64 stream) : eng_(mix_streams(seed, stream)) {}

  u64 next_u64() { return eng_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  u64 uniform_index(u64 n) {
    // Rejection sampling keeps the draw exactly uniform.
    const u64 limit = n * ((~u64{0}) / n);
    u64 x;
    do {
      x = eng_();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller; the second draw of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * M_PI * uniform();
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  // Circularly symmetric complex gaussian with E|z|^2 = var.
  std::complex<double> complex_normal(double var) {
    const double s = std::sqrt(var * 0.5);
    return {s * normal(), s * normal()};
  }

  template <class It>
  void shuffle(It first, It last) {
    const i64 n = last - first;
    for (i64 i = n - 1; i > 0; --i) {
      const i64 j = static_cast<i64>(uniform_index(static_cast<u64>(i + 1)));
      std::swap(first[i], first[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace ewirp
