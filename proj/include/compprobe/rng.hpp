#pragma once

#include <cstdint>
#include <span>
#include <utility>

namespace compprobe {

// xoshiro256** seeded through splitmix64. Every distribution below is
// written out by hand so streams match across compilers and platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next();

  // Uniform integer in [0, bound). bound must be > 0.
  std::uint64_t below(std::uint64_t bound);

  // Uniform double in [0, 1) with 53 bits of precision.
  double uniform();

  // Standard normal via Box-Muller (no cached second value).
  double normal();

  bool coin() { return (next() >> 63) != 0; }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  // Independent child stream, e.g. one per permutation replicate.
  Rng fork(std::uint64_t stream) const;

 private:
  std::uint64_t s_[4];
};

std::uint64_t splitmix64(std::uint64_t& state);

}  // namespace compprobe
