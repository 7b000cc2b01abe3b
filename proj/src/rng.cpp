#include "dprune/rng.hpp"

#include <cmath>
#include <numbers>

namespace dprune {

double SplitMix64::next_normal() {
  // 1 - u keeps the argument of log strictly positive.
  const double u1 = 1.0 - next_uniform();
  const double u2 = next_uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return SplitMix64::mix(seed ^ SplitMix64::mix(stream + SplitMix64::kGamma));
}

}  // namespace dprune
