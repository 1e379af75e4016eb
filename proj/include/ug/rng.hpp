#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace ug {

// Deterministic, platform-independent PRNG. xoshiro256** seeded through
// splitmix64, so a 64-bit seed always expands to the same state and the
// u64 stream is identical everywhere. Floating-point draws are built from
// the integer stream (53-bit mantissa construction), never from
// std::<distribution>, whose output is implementation-defined.
class RngState {
 public:
  RngState() : RngState(0) {}

  explicit RngState(uint64_t seed) : seed_(seed) {
    uint64_t x = seed;
    for (auto& w : s_) w = splitmix64(x);
  }

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0,1), 53 random bits.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Box-Muller with a cached spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  bool bernoulli(double p) { return next_double() < p; }

  // Unbiased integer in [0, n) by rejection.
  uint64_t next_below(uint64_t n) {
    if (n == 0) throw std::invalid_argument("RngState::next_below: n == 0");
    const uint64_t threshold = (0 - n) % n;
    for (;;) {
      const uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derive an independent stream for a named purpose. Keeps e.g. the data
  // order, dropout, and critic sampling streams isolated from each other.
  RngState fork(std::string_view tag) const {
    uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (const char c : tag) {
      h ^= static_cast<uint8_t>(c);
      h *= 1099511628211ull;
    }
    uint64_t x = seed_ ^ h;
    return RngState(splitmix64(x));
  }

  // Serialization of the full state (seed alone is not enough mid-stream).
  std::vector<uint64_t> dump() const {
    return {seed_, s_[0], s_[1], s_[2], s_[3], has_spare_ ? 1ull : 0ull,
            bits_of(spare_)};
  }

  static RngState restore(const std::vector<uint64_t>& w) {
    if (w.size() != 7) throw std::invalid_argument("RngState::restore: bad state size");
    RngState r(w[0]);
    r.s_[0] = w[1];
    r.s_[1] = w[2];
    r.s_[2] = w[3];
    r.s_[3] = w[4];
    r.has_spare_ = w[5] != 0;
    r.spare_ = double_of(w[6]);
    return r;
  }

 private:
  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static uint64_t bits_of(double d) {
    uint64_t u;
    static_assert(sizeof(u) == sizeof(d));
    __builtin_memcpy(&u, &d, sizeof(u));
    return u;
  }

  static double double_of(uint64_t u) {
    double d;
    __builtin_memcpy(&d, &u, sizeof(d));
    return d;
  }

  uint64_t seed_ = 0;
  uint64_t s_[4] = {};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace ug
