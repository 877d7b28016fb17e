#pragma once

#include <cstdint>
#include <random>

namespace lesionseg {

// Finalizer from splitmix64: bijective 64-bit mixer.
inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline double u64_to_unit_double(std::uint64_t x) {
  // 53 significant bits -> [0,1)
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

// Stateless counter-based stream. The draw for a given (seed, a, b, c) tuple
// is a pure function of its arguments, so parallel consumers get identical
// values regardless of scheduling.
inline std::uint64_t counter_u64(std::uint64_t seed, std::uint64_t a,
                                 std::uint64_t b, std::uint64_t c) {
  std::uint64_t z = mix64(seed + 0x9E3779B97F4A7C15ULL);
  z = mix64(z ^ (a + 0xBF58476D1CE4E5B9ULL));
  z = mix64(z ^ (b + 0x94D049BB133111EBULL));
  z = mix64(z ^ (c + 0xD6E8FEB86659FD93ULL));
  return z;
}

inline double counter_uniform(std::uint64_t seed, std::uint64_t a,
                              std::uint64_t b, std::uint64_t c) {
  return u64_to_unit_double(counter_u64(seed, a, b, c));
}

// Sequential generator with hand-rolled transforms so that the produced
// streams are identical across platforms and standard-library versions
// (std::normal_distribution et al. are not pinned by the standard).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // [0,1)
  double uniform() { return u64_to_unit_double(next_u64()); }

  // (0,1)
  double uniform_pos() {
    double u;
    do {
      u = uniform();
    } while (u <= 0.0);
    return u;
  }

  double uniform_range(double lo, double hi) {
    return lo + (hi - lo) * uniform();
  }

  // Box-Muller; one spare value is cached.
  double normal();

  // Marsaglia-Tsang squeeze method, shape > 0, unit scale.
  double gamma(double shape);

  double chi_squared(double dof) { return 2.0 * gamma(0.5 * dof); }

 private:
  std::mt19937_64 engine_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace lesionseg
