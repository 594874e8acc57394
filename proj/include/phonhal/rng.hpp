#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace phonhal {

// Seeded random source. All stochastic code takes one of these explicitly so
// runs are reproducible from a single seed.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }
  // Uniform integer in [lo, hi].
  uint64_t uniform_int(uint64_t lo, uint64_t hi) {
    return std::uniform_int_distribution<uint64_t>(lo, hi)(engine_);
  }
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal() { return normal_(engine_); }

  // Independent child stream; the parent advances by one draw.
  Rng split() { return Rng(mix(next_u64())); }

  std::string state() const;
  void restore(const std::string& state);

  static uint64_t mix(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }
  // Deterministic seed for stream `index` under `base`.
  static uint64_t derive(uint64_t base, uint64_t index) { return mix(base ^ mix(index + 1)); }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace phonhal
