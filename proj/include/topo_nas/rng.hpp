#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>

namespace topo_nas {

// Counter-based random streams.
//
// Every random decision in the engine is drawn from a stream whose key is a
// pure function of (master seed, purpose, indices...). A stream is a
// SplitMix64 sequence: output i is mix64(key + (i + 1) * gamma). Nothing is
// carried between streams, so a draw depends only on its coordinates and
// never on how many draws happened elsewhere.
//
// Stream-splitting rule:
//   key(seed, purpose, a, b, ...) = fold(mix64(seed ^ kSeedSalt), purpose, a, b, ...)
//   fold(k, x) = mix64(k ^ mix64(x + kGamma))
//
// Coordinates used by the engine:
//   architecture sampling   (purpose::architecture, step, edge)
//   minibatch order          (purpose::batch, epoch)
//   parameter init           (purpose::init, edge, candidate)   head uses edge = ~0
//   SGLD noise               (purpose::noise, step, edge, candidate)
//   dataset generation       (purpose::dataset, part)
//   evolution                (purpose::evolution), one sequential stream
//   per-stage seeds          (purpose::experiment, stage[, index])

enum class purpose : std::uint64_t {
  architecture = 1,
  batch = 2,
  init = 3,
  noise = 4,
  dataset = 5,
  evolution = 6,
  ground_truth = 7,
  experiment = 8,
};

inline constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;
inline constexpr std::uint64_t kSeedSalt = 0x5851f42d4c957f2dULL;

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t stream_key(std::uint64_t seed, purpose p,
                                   std::initializer_list<std::uint64_t> coords = {}) noexcept {
  std::uint64_t k = mix64(seed ^ kSeedSalt);
  k = mix64(k ^ mix64(static_cast<std::uint64_t>(p) + kGamma));
  for (auto c : coords) k = mix64(k ^ mix64(c + kGamma));
  return k;
}

class CounterRng {
 public:
  using result_type = std::uint64_t;

  explicit constexpr CounterRng(std::uint64_t key) noexcept : key_(key) {}
  CounterRng(std::uint64_t seed, purpose p, std::initializer_list<std::uint64_t> coords = {}) noexcept
      : key_(stream_key(seed, p, coords)) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  constexpr result_type operator()() noexcept { return mix64(key_ + (++counter_) * kGamma); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) (Lemire's multiply-and-reject).
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    auto m = static_cast<unsigned __int128>((*this)()) * n;
    auto lo = static_cast<std::uint64_t>(m);
    if (lo < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (lo < threshold) {
        m = static_cast<unsigned __int128>((*this)()) * n;
        lo = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  // Standard normal via Box-Muller; one variate per two uniforms, no cached state.
  double normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace topo_nas
