#pragma once

// Counter-based random numbers. Every draw is a pure function of a key
// (seed plus stream coordinates) and a counter, so results never depend on
// evaluation order or thread scheduling.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace clustcal::rng {

/// SplitMix64 finaliser; a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives a stream key from a seed and any number of coordinates.
constexpr std::uint64_t derive(std::uint64_t seed, std::initializer_list<std::uint64_t> coords) {
  std::uint64_t k = mix64(seed);
  for (std::uint64_t c : coords) k = mix64(k ^ mix64(c + 0x632be59bd9b4e019ULL));
  return k;
}

/// Uniform in the open interval (0,1) from 53 random bits.
constexpr double to_unit(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

/// A stream of draws addressed by (key, counter).
class Stream {
public:
  constexpr explicit Stream(std::uint64_t key) : key_(key) {}

  constexpr std::uint64_t key() const { return key_; }

  constexpr std::uint64_t bits(std::uint64_t counter) const { return mix64(key_ ^ mix64(counter)); }
  constexpr double uniform(std::uint64_t counter) const { return to_unit(bits(counter)); }

  /// Standard normal via Box-Muller on counters 2c and 2c+1.
  double normal(std::uint64_t counter) const {
    const double u1 = uniform(2 * counter);
    const double u2 = uniform(2 * counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  constexpr Stream substream(std::uint64_t id) const { return Stream(derive(key_, {id})); }

private:
  std::uint64_t key_;
};

/// Sequential engine on top of a Stream, satisfying UniformRandomBitGenerator.
class Engine {
public:
  using result_type = std::uint64_t;

  explicit Engine(Stream s) : stream_(s) {}
  explicit Engine(std::uint64_t key) : stream_(key) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  result_type operator()() { return stream_.bits(counter_++); }
  double uniform() { return stream_.uniform(counter_++); }
  double normal() { return stream_.normal(counter_++); }

  /// Uniform integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t b = (*this)();
    while (b >= limit) b = (*this)();
    return b % n;
  }

private:
  Stream stream_;
  std::uint64_t counter_ = 0;
};

}  // namespace clustcal::rng
