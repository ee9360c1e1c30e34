#pragma once

#include <cstdint>

namespace mtlforge {

// Portable 64-bit shift-register generator (xorshift64* with a splitmix64
// seed scramble). Every stochastic step in the project .. weight init, batch
// shuffling, noise streams .. draws from this generator so that a given seed
// reproduces identical bytes on any platform or implementation language.
//
// Update rule, exactly:
//   state ^= state >> 12;
//   state ^= state << 25;
//   state ^= state >> 27;
//   output = state * 0x2545F4914F6CDD1D
//
// Seeding: state = splitmix64(seed), with splitmix64(x) =
//   x += 0x9E3779B97F4A7C15;
//   x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9;
//   x = (x ^ (x >> 27)) * 0x94D049BB133111EB;
//   x ^= x >> 31;
// A zero post-scramble state is replaced with 0x9E3779B97F4A7C15.
//
// Doubles are drawn as (output >> 11) * 2^-53, uniform on [0, 1).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(splitmix64(seed)) {
    if (state_ == 0) state_ = 0x9E3779B97F4A7C15ULL;
  }

  std::uint64_t next_u64() {
    state_ ^= state_ >> 12;
    state_ ^= state_ << 25;
    state_ ^= state_ >> 27;
    return state_ * 0x2545F4914F6CDD1DULL;
  }

  // uniform on [0, 1)
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // uniform on [lo, hi)
  double next_double(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

  // uniform integer in [0, n), n > 0; modulo bias is irrelevant at our n
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s == 0 ? 0x9E3779B97F4A7C15ULL : s; }

  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    x ^= x >> 31;
    return x;
  }

  // Stream derivation for per-sample / per-epoch substreams:
  //   derive(seed, n) = splitmix64(splitmix64(seed) ^ (n + 1) * 0x9E3779B97F4A7C15)
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t n) {
    return splitmix64(splitmix64(seed) ^ ((n + 1) * 0x9E3779B97F4A7C15ULL));
  }

 private:
  std::uint64_t state_;
};

}  // namespace mtlforge
