// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "crnn/error.hpp"
#include "crnn/tensor.hpp"

namespace crnn {

/// SplitMix64 (Steele, Lea & Flood 2014). The whole generator is the
/// recurrence below, so ports in other languages reproduce the stream exactly:
///
///   state += 0x9E3779B97F4A7C15
///   z = state
///   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
///   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
///   return z ^ (z >> 31)
///
/// uniform01() takes the top 53 bits: (next() >> 11) * 2^-53, in [0, 1).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), state_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Unbiased integer in [0, n) by rejection on the top of the 64-bit range.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw DomainError("Rng::below: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next();
    } while (x >= limit);
    return x % n;
  }

  /// Fisher-Yates, iterating from the back.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
};

/// I.i.d. Uniform(-limit, +limit) draws in row-major order.
inline Tensor uniform_init(Rng& rng, Shape shape, double limit) {
  if (!(limit > 0.0)) throw DomainError("uniform_init: limit must be positive");
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(-limit, limit);
  return t;
}

}  // namespace crnn
