#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace fxmm {

// splitmix64; used to derive independent substream seeds from a master seed.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Named RNG purposes. Each (seed, purpose, epoch) triple yields an
// independent stream, so resuming at an epoch boundary replays exactly.
enum class RngPurpose : std::uint64_t {
  init = 1,
  shuffle = 2,
  negatives = 3,
  moe_noise = 4,
  synthetic = 5,
};

// Deterministic xoshiro256** generator. Self-contained so draws are
// bit-identical across platforms and standard-library versions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t s = seed;
    for (auto& w : state_) {
      s = mix64(s);
      w = s;
    }
  }

  static Rng stream(std::uint64_t master_seed, RngPurpose purpose, std::uint64_t epoch = 0) {
    std::uint64_t s = mix64(master_seed ^ mix64(static_cast<std::uint64_t>(purpose)));
    return Rng(mix64(s ^ mix64(epoch + 0x517cc1b727220a95ULL)));
  }

  std::uint64_t next_u64() {
    auto rotl = [](std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform integer in [0, bound), bound >= 1. Lemire multiply-shift.
  std::uint64_t next_below(std::uint64_t bound) {
    unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * bound;
    std::uint64_t lo = static_cast<std::uint64_t>(m);
    if (lo < bound) {
      std::uint64_t threshold = (0 - bound) % bound;
      while (lo < threshold) {
        m = static_cast<unsigned __int128>(next_u64()) * bound;
        lo = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  // Uniform in (0, 1].
  double next_unit() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller (one draw per pair of uniforms; no
  // cached state, so forked streams stay reproducible).
  double next_gaussian() {
    const double u1 = next_unit();
    const double u2 = next_unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Normal(0, std^2) clipped by rejection to +/- 2 std.
  double next_trunc_normal(double stddev) {
    double z = next_gaussian();
    while (z < -2.0 || z > 2.0) z = next_gaussian();
    return z * stddev;
  }

 private:
  std::uint64_t state_[4];
};

}  // namespace fxmm
