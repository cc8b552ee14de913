#pragma once

#include <cstdint>
#include <string_view>

namespace mlqa {

/// One splitmix64 output step applied to an arbitrary 64-bit value.
constexpr std::uint64_t splitmix64_mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Derives an independent sub-seed from a root seed and a label.
/// FNV-1a over the label, folded into the seed, then mixed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label, std::uint64_t index);

/// splitmix64 generator. Every random draw in the project goes through this type,
/// so datasets and initializations are reproducible bit-for-bit across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    return splitmix64_mix(state_);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling, so unbiased.
  std::uint64_t below(std::uint64_t n);

  /// Standard normal via Box-Muller (no cached second value, keeps state a single u64).
  double normal();

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  std::uint64_t state_;
};

}  // namespace mlqa
