#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace ave3 {

// mt19937_64 with hand-rolled output transforms. The standard distributions
// are implementation-defined, so reproducible corpora and weight init go
// through these helpers instead.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // [0, 1)
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  float uniform_f(float lo, float hi) {
    return static_cast<float>(uniform(lo, hi));
  }

  // Box-Muller; one value per call, cached pair discarded for simplicity.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // [0, n)
  uint64_t below(uint64_t n) {
    return n == 0 ? 0 : engine_() % n;
  }

  // Derive an independent child stream (for per-scene seeding).
  Rng fork(uint64_t salt) {
    return Rng(engine_() ^ (salt * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull));
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace ave3
