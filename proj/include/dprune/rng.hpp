#pragma once

#include <cstdint>

namespace dprune {

// Counter-based generator: value n of stream `seed` is splitmix64(seed + (n+1)*gamma).
// Any language can reproduce a stream bit-exactly from (seed, counter).
class SplitMix64 {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t next_u64() {
    state_ += kGamma;
    return mix(state_);
  }

  // Uniform in [0, 1) with 53 bits of precision.
  double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, bound). Plain modulo; the bias is < 2^-40 for the
  // bounds used here.
  std::uint64_t next_below(std::uint64_t bound) { return next_u64() % bound; }

  // Box-Muller, one draw per call (the sine branch is discarded).
  double next_normal();

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

// Derives an independent seed for a named sub-stream.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace dprune
