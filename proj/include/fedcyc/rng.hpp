#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fedcyc {

// splitmix64 finalizer
constexpr std::uint64_t splitmix64(std::uint64_t& state) noexcept {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives an independent stream seed from a master seed and a purpose path,
/// e.g. mix_seed(master, {kLocalSgd, round, client}). Order-sensitive.
std::uint64_t mix_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path);

// Purpose tags for mix_seed paths. Each consumer owns one tag so streams
// never collide across modules.
namespace rng_tag {
inline constexpr std::uint64_t kDatagenAnchors = 0xA1;
inline constexpr std::uint64_t kDatagenCell = 0xA2;
inline constexpr std::uint64_t kDatagenEval = 0xA3;
inline constexpr std::uint64_t kShuffle = 0xA4;
inline constexpr std::uint64_t kParticipants = 0xB1;
inline constexpr std::uint64_t kLocalSgd = 0xB2;
inline constexpr std::uint64_t kConstantsProbe = 0xC1;
inline constexpr std::uint64_t kVarianceCheck = 0xC2;
inline constexpr std::uint64_t kFrozenModel = 0xC3;
}  // namespace rng_tag

/// Deterministic draw stream. Uniform and normal variates are produced from
/// the raw engine words here rather than std::*_distribution, so a given seed
/// yields the same sequence on every platform and standard library.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : engine_(seed) {}

  /// Uniform double in [0, 1).
  double uniform01();

  /// Standard normal (Box-Muller; pairs are cached).
  double normal();

  /// Uniform integer in [0, bound), bound >= 1. Unbiased via rejection.
  std::uint64_t below(std::uint64_t bound);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace fedcyc
