#pragma once

#include <cstdint>

namespace buckle {

/// SplitMix64 finalizer; a bijection on 64-bit words.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// Derives an independent stream key from a parent key and a stream index.
std::uint64_t derive_key(std::uint64_t parent, std::uint64_t stream) noexcept;

/// Counter-based generator: draw k of a stream is mix64(key + (k + 1) * golden).
/// Draws are a pure function of (key, counter), so results do not depend on the
/// platform's <random> distributions. All real-valued draws use the top 53 bits.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) noexcept : key_(key) {}

  std::uint64_t next_u64() noexcept;

  /// Uniform in [0, 1).
  double uniform() noexcept;

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) noexcept;

  /// Uniform integer in [lo, hi] (inclusive), rejection-sampled so it is unbiased.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) noexcept;

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace buckle
