#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "pfed/tensor.hpp"

namespace pfed {

// splitmix64 finalizer; good avalanche for seed derivation
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Order-sensitive derivation of an independent stream seed from a base seed
// and up to three indices (client, round, epoch, ...). All randomness in the
// project flows through this so concurrency cannot perturb results.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a = 0, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
  std::uint64_t s = mix64(base);
  s = mix64(s ^ (a + 0x100));
  s = mix64(s ^ (b + 0x10000));
  s = mix64(s ^ (c + 0x1000000));
  return s;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(eng_); }

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(eng_); }

  // inclusive bounds
  long uniform_int(long lo, long hi) { return std::uniform_int_distribution<long>(lo, hi)(eng_); }

  double normal(double mean = 0.0, double stddev = 1.0) { return normal_(eng_) * stddev + mean; }

  double gamma(double alpha) { return std::gamma_distribution<double>(alpha, 1.0)(eng_); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(0, static_cast<long>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    shuffle(p);
    return p;
  }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
  std::normal_distribution<double> normal_;
};

inline Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, stddev);
  return t;
}

}  // namespace pfed
