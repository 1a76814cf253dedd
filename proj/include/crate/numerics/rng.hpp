#pragma once

#include <cstdint>
#include <vector>

namespace crate {

/// xoshiro256** seeded through splitmix64.
///
/// The integer stream depends only on the seed, so it is identical across
/// platforms. Every sampling site in the code base takes an explicit Rng;
/// there is no global generator.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64();

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n);

  /// Standard normal via Box-Muller (one value per call, the pair's twin is cached).
  double normal();

  /// Independent generator derived from this one's seed and a stream tag.
  /// Does not advance this generator.
  Rng fork(std::uint64_t stream) const;

  /// k distinct indices from [0, n), in selection order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// splitmix64 finalizer, used for seed derivation.
std::uint64_t mix64(std::uint64_t x);

}  // namespace crate
