#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace pldet {

// splitmix64; used to derive independent stream seeds from (seed, tag...) tuples.
inline std::uint64_t hash_mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t seed_combine(std::uint64_t a, std::uint64_t b) {
  return hash_mix(a ^ hash_mix(b));
}

inline std::uint64_t seed_combine(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return seed_combine(seed_combine(a, b), c);
}

inline std::uint64_t seed_combine(std::uint64_t a, std::uint64_t b, std::uint64_t c,
                                  std::uint64_t d) {
  return seed_combine(seed_combine(a, b, c), d);
}

// mt19937_64 wrapper with hand-rolled distributions. The engine itself is
// bit-exact by the standard; std::*_distribution are not, so uniform/normal
// are implemented here to keep runs reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [lo, hi] inclusive
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(static_cast<std::uint64_t>(hi - lo + 1) * uniform());
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; one value per call, no caching so the stream is easy to reason about.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    return mean + stddev * z;
  }

  std::mt19937_64& engine() { return engine_; }
  const std::mt19937_64& engine() const { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace pldet
