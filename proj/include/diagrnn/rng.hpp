#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace diagrnn {

// Deterministic random source. std::mt19937_64 has a standard-pinned output
// sequence; all conversions to doubles/ints are done by hand here so that a
// seed fully determines every draw, bit for bit. The std::*_distribution
// classes are deliberately avoided (their algorithms are unspecified).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double u01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

  double log_uniform(double lo, double hi) {
    return std::exp(uniform(std::log(lo), std::log(hi)));
  }

  // Inclusive bounds, rejection sampled to avoid modulo bias.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
    std::uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return lo + static_cast<std::int64_t>(v % range);
  }

  bool bernoulli(double p) { return u01() < p; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace diagrnn
