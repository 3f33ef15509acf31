// Copyright (c) 2026 The rkd authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace rkd {

// splitmix64: used both as a stream mixer and as the core generator.
// We roll our own instead of using <random> distributions so that
// sequences are identical across standard library implementations.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Derive an independent child seed from (seed, tag). Tags are short strings
// such as "init", "shuffle", "data".
inline uint64_t derive_seed(uint64_t seed, const std::string& tag) {
  uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the tag
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  uint64_t s = seed ^ 0x6a09e667f3bcc909ULL;
  splitmix64(s);
  s ^= h;
  splitmix64(s);
  return s;
}

inline uint64_t derive_seed(uint64_t seed, const std::string& tag, uint64_t index) {
  uint64_t s = derive_seed(seed, tag) ^ (0x9e3779b97f4a7c15ULL * (index + 1));
  splitmix64(s);
  return s;
}

// Small deterministic RNG with the handful of draws the project needs.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ^ 0x853c49e6748fea9bULL) {
    splitmix64(state_);  // decorrelate trivially related seeds
  }

  uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

  // Standard normal via Box-Muller. One value per call; the spare is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Fisher-Yates over [0, n); returns the permutation.
  template <typename Index>
  void shuffle(std::vector<Index>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace rkd
