#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "pmv/core.hpp"

namespace pmv {

// Philox-4x32-10 counter-based generator (Salmon et al., SC 2011).
// A block is a pure function of (counter, key), so any (particle, step,
// coordinate) triple maps to the same Gaussian increment regardless of
// evaluation order or worker count.
namespace philox {

constexpr std::uint32_t kW32A = 0x9E3779B9u;
constexpr std::uint32_t kW32B = 0xBB67AE85u;
constexpr std::uint32_t kM4x32A = 0xD2511F53u;
constexpr std::uint32_t kM4x32B = 0xCD9E8D57u;

inline void mul_hi_lo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * static_cast<std::uint64_t>(b);
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

inline std::array<std::uint32_t, 4> block(std::array<std::uint32_t, 4> ctr,
                                          std::array<std::uint32_t, 2> key) {
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mul_hi_lo(kM4x32A, ctr[0], hi0, lo0);
    mul_hi_lo(kM4x32B, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kW32A;
    key[1] += kW32B;
  }
  return ctr;
}

// Uniform in (0, 1]: 53 significant bits from two words.
inline double to_unit(std::uint32_t a, std::uint32_t b) {
  const std::uint64_t bits = (static_cast<std::uint64_t>(a) << 32) | b;
  return (static_cast<double>(bits >> 11) + 1.0) * 0x1.0p-53;
}

}  // namespace philox

enum class StreamPurpose : std::uint16_t {
  Simulation = 0,
  Init = 1,
  Projection = 2,
  Jitter = 3,
  Subsample = 4,
};

/// Counter-based noise stream. The counter layout is
/// (particle key, step index, purpose | coordinate, block), keyed by the
/// 64-bit seed. An optional key map reattaches streams to particles, which
/// is what synchronous coupling and the relabeling tests rely on.
class NoisePolicy {
 public:
  NoisePolicy() : seed_(0) {}
  explicit NoisePolicy(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  void set_key_map(std::vector<std::uint32_t> keys) { key_map_ = std::move(keys); }
  const std::vector<std::uint32_t>& key_map() const { return key_map_; }

  std::uint32_t key_for(std::uint32_t particle) const {
    if (key_map_.empty()) return particle;
    return key_map_[particle];
  }

  std::array<std::uint32_t, 4> raw(std::uint32_t particle_key, std::uint32_t step,
                                   StreamPurpose purpose, std::uint16_t coord,
                                   std::uint32_t block = 0) const {
    const std::uint32_t tagged =
        (static_cast<std::uint32_t>(purpose) << 16) | static_cast<std::uint32_t>(coord);
    return philox::block({particle_key, step, tagged, block},
                         {static_cast<std::uint32_t>(seed_),
                          static_cast<std::uint32_t>(seed_ >> 32)});
  }

  double uniform(std::uint32_t particle_key, std::uint32_t step, StreamPurpose purpose,
                 std::uint16_t coord, std::uint32_t block = 0) const {
    const auto w = raw(particle_key, step, purpose, coord, block);
    return philox::to_unit(w[0], w[1]);
  }

  /// Standard Gaussian via Box-Muller from one Philox block.
  double gaussian(std::uint32_t particle_key, std::uint32_t step, StreamPurpose purpose,
                  std::uint16_t coord, std::uint32_t block = 0) const {
    const auto w = raw(particle_key, step, purpose, coord, block);
    const double u1 = philox::to_unit(w[0], w[1]);
    const double u2 = philox::to_unit(w[2], w[3]);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

 private:
  std::uint64_t seed_;
  std::vector<std::uint32_t> key_map_;
};

}  // namespace pmv
