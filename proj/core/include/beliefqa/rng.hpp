#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace beliefqa {

/// Deterministic named-stream random source. Every consumer derives its own
/// stream as hash(master, purpose, index); there is no global generator.
/// All samplers are spelled out explicitly (no std distributions) so the
/// produced values are identical on any conforming platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  /// Stable stream derivation: FNV-1a over the purpose string, mixed with the
  /// master seed and index through SplitMix64 finalizers.
  static std::uint64_t derive(std::uint64_t master, std::string_view purpose,
                              std::uint64_t index = 0);

  static Rng stream(std::uint64_t master, std::string_view purpose,
                    std::uint64_t index = 0) {
    return Rng(derive(master, purpose, index));
  }

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform double in [0, 1), 53 random bits.
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller (no cached spare).
  double normal();

  /// Uniform integer in [0, n), rejection sampled. n must be > 0.
  std::uint64_t below(std::uint64_t n);

 private:
  std::mt19937_64 gen_;
};

}  // namespace beliefqa
