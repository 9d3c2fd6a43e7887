#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string_view>

namespace ruq {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Combines a key with a discriminator into a new well-mixed key.
constexpr std::uint64_t hash_combine(std::uint64_t key, std::uint64_t value) noexcept {
  return mix64(key ^ mix64(value + 0x632BE59BD9B4E019ULL));
}

inline std::uint64_t hash_string(std::string_view s) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Content hash of a row of reals; used to key per-row noise streams so that
/// predictions do not depend on the position of a row inside a batch.
std::uint64_t hash_row(std::span<const double> row) noexcept;

/// Splittable random stream (SplitMix64 over a mixed key).
///
/// Independent streams are derived with `split`, never by sharing one
/// generator across owners. Draws are a pure function of (key, draw index).
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0) noexcept
      : key_(mix64(seed ^ 0x2545F4914F6CDD1DULL)), state_(key_) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept {
    state_ += 0x9E3779B97F4A7C15ULL;
    return mix64(state_);
  }

  /// Child stream; deterministic in (parent key, stream id), independent of
  /// how many values the parent has produced.
  Rng split(std::uint64_t stream_id) const noexcept {
    Rng child;
    child.key_ = hash_combine(key_, stream_id);
    child.state_ = child.key_;
    return child;
  }

  /// Uniform on the open interval (0, 1).
  double uniform() noexcept { return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53; }

  std::uint64_t below(std::uint64_t n) noexcept {
    // Lemire's multiply-shift; bias is below 2^-64 * n, irrelevant here.
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>((*this)()) * n) >> 64);
  }

  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double phi = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(phi);
    has_spare_ = true;
    return r * std::cos(phi);
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Uniform on {-1, +1}.
  double sign() noexcept { return ((*this)() >> 63) ? 1.0 : -1.0; }

 private:
  std::uint64_t key_;
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace ruq
