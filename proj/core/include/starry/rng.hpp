#pragma once

#include <cstdint>
#include <random>

namespace starry {

// Deterministic random source. Normal variates use an explicit Box-Muller
// transform rather than std::normal_distribution so that streams are
// bit-reproducible for a given seed independent of the standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal, Box-Muller with pair caching
  double normal();

  // uniform integer in [0, n)
  std::uint64_t randint(std::uint64_t n);

  // Derives a decorrelated seed for a sub-stream (worker, sample, episode).
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace starry
