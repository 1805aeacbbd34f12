#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace temprec {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seeded RNG used everywhere determinism matters. mt19937_64 output is fully
// specified by the standard; the draw helpers below replace the std::*
// distributions, whose sequences are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // uniform in [0, 1), 53-bit resolution
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // uniform in [0, n), rejection sampled so every value is equally likely
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  double uniform_range(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derives an independent stream; forked streams do not disturb the parent.
  Rng fork(std::uint64_t stream) {
    return Rng(splitmix64(next_seed_base() ^ splitmix64(stream + 0x51ed2701)));
  }

 private:
  std::uint64_t next_seed_base() { return engine_(); }
  std::mt19937_64 engine_;
};

// Stateless hash to [0, 1) from a (seed, user, item) triple.
inline double hash_uniform(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t h = splitmix64(seed ^ splitmix64(a ^ 0x2545f4914f6cdd1dULL));
  h = splitmix64(h ^ splitmix64(b ^ 0x9e3779b97f4a7c15ULL));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

}  // namespace temprec
