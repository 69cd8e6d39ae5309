#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace ocl {

using Rng = std::mt19937_64;

// Derives an independent generator from a base seed and a purpose tag, so that
// e.g. replay sampling and augmentation noise never share a stream.
inline Rng make_rng(std::uint64_t seed, std::uint64_t tag = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32)};
  return Rng(seq);
}

namespace rng_tag {
inline constexpr std::uint64_t kStreamMeans = 1;
inline constexpr std::uint64_t kStreamSamples = 2;
inline constexpr std::uint64_t kStreamSplit = 3;
inline constexpr std::uint64_t kNetInit = 4;
inline constexpr std::uint64_t kReservoir = 5;
inline constexpr std::uint64_t kReplaySample = 6;
inline constexpr std::uint64_t kAugment = 7;
inline constexpr std::uint64_t kCovering = 8;
}  // namespace rng_tag

}  // namespace ocl
