#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

namespace klnorm {

// SplitMix64 (Steele, Lea & Flood). Counter-based: the j-th output is a fixed
// bijective mix of seed + j * 0x9e3779b97f4a7c15, so a stream is fully
// determined by its 64-bit seed and reproduces across platforms and builds.
// Every random decision in the library (weight init, shuffling, synthetic
// data, dropout, Monte-Carlo draws) goes through this generator.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Standard normal via Box-Muller. Always consumes exactly two uniforms and
  // returns the cosine branch, so the draw count per call is fixed.
  double normal() {
    const double u1 =
        (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Unbiased integer in [0, n) by rejection on the top multiple of n.
  std::uint64_t next_below(std::uint64_t n) {
    const std::uint64_t limit = std::uint64_t(-1) - std::uint64_t(-1) % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  // Fisher-Yates.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[next_below(i)]);
    }
  }

 private:
  std::uint64_t state_;
};

// Stream tags keep the per-purpose substreams of one run seed decorrelated.
namespace rng_stream {
inline constexpr std::uint64_t kInit = 0x494e495400000001ULL;
inline constexpr std::uint64_t kShuffle = 0x5348554600000002ULL;
inline constexpr std::uint64_t kDropout = 0x44524f5000000003ULL;
inline constexpr std::uint64_t kData = 0x4441544100000004ULL;
inline constexpr std::uint64_t kSubsample = 0x5355425300000005ULL;
inline constexpr std::uint64_t kProbe = 0x50524f4200000006ULL;
}  // namespace rng_stream

inline SplitMix64 make_stream(std::uint64_t seed, std::uint64_t tag) {
  SplitMix64 mixer(seed ^ tag);
  return SplitMix64(mixer.next_u64());
}

}  // namespace klnorm
