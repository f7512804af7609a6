// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace hrda {

using real = double;

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

// splitmix64, used to derive independent seeds from (seed, salt...) tuples.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1) + 0x85ebca6b0a1c2f3dull * (c + 1);
  for (int i = 0; i < 3; ++i) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    z = z ^ (z >> 31);
  }
  return z;
}

// mt19937_64 engine with hand-rolled mappings; std::*_distribution output is
// implementation-defined and would break bitwise reproducibility across stdlibs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next() { return eng_(); }

  // unbiased bounded draw in [0, n)
  std::uint64_t below(std::uint64_t n) {
    check(n > 0, "Rng::below: n must be positive");
    std::uint64_t mask = ~0ull;
    std::uint64_t limit = mask - mask % n;
    std::uint64_t v = eng_();
    while (v >= limit) v = eng_();
    return v % n;
  }

  // inclusive range
  int uniform_int(int lo, int hi) {
    check(lo <= hi, "Rng::uniform_int: empty range");
    return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  // [0,1) with 53 random bits
  real unit() { return static_cast<real>(eng_() >> 11) * 0x1.0p-53; }

  real uniform(real lo, real hi) { return lo + (hi - lo) * unit(); }

  real normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    real u1 = unit(), u2 = unit();
    while (u1 <= 0.0) u1 = unit();
    real r = std::sqrt(-2.0 * std::log(u1));
    real a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::mt19937_64 eng_;
  real spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace hrda
