// Counter-based random streams. Every consumer derives its own stream from
// (seed, tag...) keys, so parallel and serial execution draw identical values
// and runs are reproducible bit-for-bit across platforms. No std <random>
// distributions are used anywhere: their outputs differ between library
// implementations.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace adr {

inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t key_combine(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ (mix64(b) + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
}

// splitmix64 stream addressed by an explicit counter.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t key) : key_(key) {}

  template <typename... Tags>
  static RandomStream derive(std::uint64_t seed, Tags... tags) {
    std::uint64_t k = mix64(seed);
    ((k = key_combine(k, static_cast<std::uint64_t>(tags))), ...);
    return RandomStream(k);
  }

  std::uint64_t next_u64() { return mix64(key_ + 0x9e3779b97f4a7c15ULL * (++counter_)); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int uniform_int(int n) {
    return n <= 1 ? 0 : static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; consumes two counter draws per call, no cached state.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // Fisher-Yates with this stream.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      int j = uniform_int(i + 1);
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
  }

  std::vector<int> permutation(int n) {
    std::vector<int> p(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
    shuffle(p);
    return p;
  }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace adr
