#pragma once

#include <cmath>
#include <cstdint>

namespace fovea {

/// Deterministic splittable generator. All randomness in the project flows
/// from one seed through named substreams, so that re-running a command with
/// the same seed is bit-identical regardless of thread count or scheduling.
/// The core is splitmix64; substream derivation hashes the tag into the state.
class Rng {
 public:
  Rng() : state_(0x9e3779b97f4a7c15ull) {}
  explicit Rng(uint64_t seed) : state_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

  /// Independent child stream; does not advance this stream.
  Rng substream(uint64_t tag) const { return Rng(from_state(mix(state_ ^ mix(tag + 0x1234567)))); }
  Rng substream(uint64_t a, uint64_t b) const { return substream(a).substream(b); }

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix(state_);
  }

  uint32_t next_u32() { return static_cast<uint32_t>(next_u64() >> 32); }

  /// Uniform in [0,1).
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [lo, hi] inclusive.
  long uniform_int(long lo, long hi) {
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<long>(next_u64() % span);
  }

  bool bernoulli(double p) { return next_unit() < p; }

  /// Standard normal via one-shot Box-Muller (no cached second value, so the
  /// draw count per call is fixed).
  double normal() {
    double u1 = next_unit();
    double u2 = next_unit();
    if (u1 <= 0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

 private:
  uint64_t state_;

  struct FromState {};
  static Rng from_state(uint64_t s) {
    Rng r;
    r.state_ = s;
    return r;
  }

  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
};

}  // namespace fovea
