#pragma once

#include <cmath>
#include <cstdint>
#include <string>

namespace xma {

// Splitmix64 step: the single PRNG family used everywhere in this project.
inline uint64_t splitmix64_next(uint64_t& state) {
  state += 0x9E3779B97F4A7C15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline uint64_t mix64(uint64_t a, uint64_t b) {
  uint64_t s = a + 0x9E3779B97F4A7C15ull * (b + 0x632BE59BD9B4E019ull);
  uint64_t z = (s ^ (s >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Deterministic stream with hierarchical derivation. A stream is identified
// by its key; derive() produces a child stream from the key (not from the
// current position), so consumption order never leaks between streams.
class Rng {
 public:
  explicit Rng(uint64_t seed) : key_(seed), state_(mix64(seed, 0x1db3)) {}

  Rng derive(uint64_t stream) const { return Rng(mix64(key_, stream), mix64(mix64(key_, stream), 0x1db3)); }

  uint64_t next_u64() { return splitmix64_next(state_); }

  // [0,1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  bool bernoulli(double p) { return next_double() < p; }

  // Unbiased integer in [0,n) via rejection.
  uint64_t below(uint64_t n) {
    uint64_t x, r;
    do {
      x = next_u64();
      r = x % n;
    } while (x - r > uint64_t(0) - n);
    return r;
  }

  // Box-Muller, one value per draw (no cached second sample, so the stream
  // state stays a single 64-bit word).
  double normal() {
    double u1 = 1.0 - next_double();  // (0,1]
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double trunc_normal(double sigma, double limit = 2.0) {
    double z;
    do {
      z = normal();
    } while (std::abs(z) > limit);
    return sigma * z;
  }

  uint64_t key() const { return key_; }
  uint64_t state() const { return state_; }
  static Rng restore(uint64_t key, uint64_t state) { return Rng(key, state); }

 private:
  Rng(uint64_t key, uint64_t state) : key_(key), state_(state) {}
  uint64_t key_;
  uint64_t state_;
};

// FNV-1a, used to derive per-parameter init streams from parameter names so
// initialization is independent of creation order.
inline uint64_t hash_name(const std::string& s) {
  uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

// Fixed stream tags for hierarchical derivation (seed -> purpose -> epoch ->
// sample -> ...). Values are arbitrary but frozen: changing them changes
// every run.
namespace streams {
constexpr uint64_t kInit = 1;
constexpr uint64_t kShuffle = 2;
constexpr uint64_t kAugment = 3;
constexpr uint64_t kMask = 4;
constexpr uint64_t kSynthetic = 5;
constexpr uint64_t kInversion = 6;
constexpr uint64_t kLocality = 7;
constexpr uint64_t kProbe = 8;
}  // namespace streams

}  // namespace xma
