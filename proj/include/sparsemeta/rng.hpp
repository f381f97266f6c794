#pragma once

#include <cmath>
#include <cstdint>

namespace sparsemeta {

// Counter-based deterministic RNG (splitmix64). Streams are identified by a
// seed; split() derives an independent child stream as a pure function of
// (parent seed, key), so any (root seed, path of keys) names the same stream
// regardless of draw order elsewhere. One stream per execution context;
// streams are value types and cheap to copy.
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : seed_(seed), state_(seed) {}

  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t x = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
  }

  RngStream split(uint64_t key) const { return RngStream(mix(seed_, key)); }
  RngStream split(uint64_t a, uint64_t b) const { return split(a).split(b); }

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0,1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, one value per call (the sine partner is discarded so a draw
  // costs exactly two uniforms and carries no hidden state).
  double normal() {
    double u1 = 1.0 - uniform();  // (0,1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

 private:
  uint64_t seed_;
  uint64_t state_;
};

}  // namespace sparsemeta
