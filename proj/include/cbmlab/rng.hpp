#ifndef CBMLAB_RNG_HPP
#define CBMLAB_RNG_HPP

#include <cstdint>
#include <random>

namespace cbm {

// splitmix64 finalizer; derives independent stream seeds from (seed, tag).
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

using Rng = std::mt19937_64;

}  // namespace cbm

#endif  // CBMLAB_RNG_HPP
