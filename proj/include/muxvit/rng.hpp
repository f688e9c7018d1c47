#pragma once

#include <cmath>
#include <cstdint>

namespace muxvit {

// splitmix64 stream. All stochastic behavior in the project (init, data
// generation, shuffling) runs through this so results depend only on seeds.
struct Rng {
  std::uint64_t state;

  explicit Rng(std::uint64_t seed) : state(seed ^ 0x9E3779B97F4A7C15ULL) {}
  Rng(std::uint64_t seed, std::uint64_t stream)
      : state((seed + 0x9E3779B97F4A7C15ULL) ^ (stream * 0xBF58476D1CE4E5B9ULL + 0x94D049BB133111EBULL)) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform in [lo, hi)
  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  // Box-Muller; one draw per call, second value discarded to keep the
  // stream layout simple.
  double next_normal() {
    double u1 = next_unit(), u2 = next_unit();
    while (u1 <= 0.0) u1 = next_unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  template <class It>
  void shuffle(It first, It last) {
    auto n = last - first;
    for (decltype(n) i = n - 1; i > 0; --i) {
      auto j = static_cast<decltype(n)>(next_below(static_cast<std::uint64_t>(i) + 1));
      std::swap(first[i], first[j]);
    }
  }
};

}  // namespace muxvit
