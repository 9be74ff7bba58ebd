#pragma once

#include <cstdint>
#include <string_view>

namespace ess {

// Deterministic 64-bit generator (splitmix64). Self-contained so streams are
// reproducible independent of the standard library's distribution details.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of randomness.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t state_;
};

// FNV-1a over a byte string; also used for config digests.
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// All randomness in a run flows from one root seed through named sub-streams,
// so adding a consumer never perturbs unrelated draws.
inline Rng named_stream(std::uint64_t seed, std::string_view name) {
  return Rng(fnv1a64(name, seed ^ 0x9e3779b97f4a7c15ULL));
}

}  // namespace ess
