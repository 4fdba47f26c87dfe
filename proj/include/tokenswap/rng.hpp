#pragma once

#include <cstdint>

namespace tokenswap {

// Counter-based generator: every draw is a pure function of
// (key, stream, counter), so results never depend on call order across
// streams. The mixing function is the splitmix64 finalizer.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Uniform in (0, 1), never exactly zero.
  double uniform_open();
  // Uniform integer in [0, bound), bound > 0. Rejection sampling, unbiased.
  std::uint64_t below(std::uint64_t bound);
  // Standard normal via Box-Muller; caches the second variate.
  double normal();

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t mix64(std::uint64_t x);

// Derives an independent stream id from a label and an index.
std::uint64_t stream_id(std::uint64_t label, std::uint64_t index);

// Fixed labels for the library's random streams.
namespace streams {
inline constexpr std::uint64_t kShuffle = 0x5348554646ULL;
inline constexpr std::uint64_t kInitNoise = 0x4e4f495345ULL;
inline constexpr std::uint64_t kSprite = 0x535052495445ULL;
inline constexpr std::uint64_t kWeights = 0x5745494748ULL;
inline constexpr std::uint64_t kTraining = 0x545241494eULL;
inline constexpr std::uint64_t kProbe = 0x50524f4245ULL;
}  // namespace streams

}  // namespace tokenswap
