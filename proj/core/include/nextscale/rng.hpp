#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <initializer_list>
#include <span>
#include <string_view>

namespace nextscale {

/// SplitMix64 finalizer: a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Derives an independent seed from a base seed and an ordered key path, e.g.
/// derive_seed(master, {label, index}). Order-sensitive.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = mix64(seed);
  for (std::uint64_t k : keys) {
    h = mix64(h ^ mix64(k + 0x632BE59BD9B4E019ULL));
  }
  return h;
}

/// Counter-based uniform in [0, 1): a pure function of (seed, keys), so draws
/// can be evaluated in any order or in parallel with identical results.
constexpr double keyed_uniform(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  return static_cast<double>(derive_seed(seed, keys) >> 11) * 0x1.0p-53;
}

/// Sequential stream of SplitMix64 outputs with platform-independent
/// uniform/normal/integer draws (std distributions are implementation-defined).
class SplitMixStream {
 public:
  explicit SplitMixStream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() { return mix64(state_++); }
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double a, double b) { return a + (b - a) * uniform(); }
  /// Inclusive range [lo, hi]; modulo bias is negligible for small ranges.
  int integer(int lo, int hi) { return lo + static_cast<int>(next() % static_cast<std::uint64_t>(hi - lo + 1)); }
  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::uint64_t state_;
};

/// 64-bit FNV-1a.
constexpr std::uint64_t fnv1a64(std::span<const unsigned char> bytes,
                                std::uint64_t h = 0xCBF29CE484222325ULL) {
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view text) {
  return fnv1a64(std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

}  // namespace nextscale
