#pragma once

#include <cmath>
#include <cstdint>

namespace mcnet {

// PCG32 (XSH-RR variant): deterministic across platforms, cheap to seed with
// independent streams. All randomness in the library goes through this; the
// standard <random> distributions are avoided because their output is not
// specified bit-exactly.
class Pcg32 {
 public:
  Pcg32() { seed(0x853c49e6748fea9bull, 0xda3e39cb94b95bdbull); }
  Pcg32(std::uint64_t initstate, std::uint64_t initseq) { seed(initstate, initseq); }

  void seed(std::uint64_t initstate, std::uint64_t initseq) {
    state_ = 0u;
    inc_ = (initseq << 1u) | 1u;
    next_u32();
    state_ += initstate;
    next_u32();
    have_cached_normal_ = false;
  }

  std::uint32_t next_u32() {
    std::uint64_t old = state_;
    state_ = old * 6364136223846793005ull + inc_;
    std::uint32_t xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  // Unbiased integer in [0, bound) via rejection sampling.
  std::uint32_t next_below(std::uint32_t bound) {
    std::uint32_t threshold = (0u - bound) % bound;
    for (;;) {
      std::uint32_t r = next_u32();
      if (r >= threshold) return r % bound;
    }
  }

  int next_int(int lo, int hi) {  // inclusive range
    return lo + static_cast<int>(next_below(static_cast<std::uint32_t>(hi - lo + 1)));
  }

  double next_double() {  // [0, 1)
    return next_u32() * (1.0 / 4294967296.0);
  }

  double next_double(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Box-Muller; caches the second variate.
  double next_normal() {
    if (have_cached_normal_) {
      have_cached_normal_ = false;
      return cached_normal_;
    }
    double u1, u2;
    do {
      u1 = next_double();
    } while (u1 <= 1e-12);
    u2 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    cached_normal_ = r * std::sin(theta);
    have_cached_normal_ = true;
    return r * std::cos(theta);
  }

 private:
  std::uint64_t state_ = 0;
  std::uint64_t inc_ = 0;
  double cached_normal_ = 0.0;
  bool have_cached_normal_ = false;
};

}  // namespace mcnet
