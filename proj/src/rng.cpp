#include "dyrep/rng.hpp"

#include <cmath>
#include <numbers>

namespace dyrep {

namespace {

uint64_t splitmix64(uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

uint64_t fnv1a64(std::string_view bytes, uint64_t basis) {
  uint64_t h = basis;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t fnv1a64_mix(uint64_t a, uint64_t b) {
  uint64_t h = a;
  for (int i = 0; i < 8; ++i) {
    h ^= (b >> (8 * i)) & 0xff;
    h *= 0x100000001b3ULL;
  }
  return h;
}

SplitRng::SplitRng(uint64_t seed) : key_(seed) {
  uint64_t x = seed;
  for (auto& s : s_) s = splitmix64(x);
}

SplitRng SplitRng::split(std::string_view name) const {
  return SplitRng(fnv1a64(name, fnv1a64_mix(0xcbf29ce484222325ULL, key_)));
}

SplitRng SplitRng::split(uint64_t index) const {
  return SplitRng(fnv1a64_mix(fnv1a64_mix(0x9e3779b97f4a7c15ULL, key_), index));
}

uint64_t SplitRng::next_u64() {
  // xoshiro256**
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

double SplitRng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SplitRng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

uint64_t SplitRng::uniform_int(uint64_t n) {
  // Lemire's multiply-shift with rejection for exact uniformity.
  uint64_t x = next_u64();
  __uint128_t m = static_cast<__uint128_t>(x) * n;
  uint64_t l = static_cast<uint64_t>(m);
  if (l < n) {
    uint64_t t = (0 - n) % n;
    while (l < t) {
      x = next_u64();
      m = static_cast<__uint128_t>(x) * n;
      l = static_cast<uint64_t>(m);
    }
  }
  return static_cast<uint64_t>(m >> 64);
}

double SplitRng::normal() {
  if (has_cached_) {
    has_cached_ = false;
    return cached_normal_;
  }
  // Box-Muller; u1 shifted away from zero.
  double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * std::numbers::pi * u2;
  cached_normal_ = r * std::sin(a);
  has_cached_ = true;
  return r * std::cos(a);
}

void SplitRng::fill_normal(std::vector<float>& v, double stddev) {
  for (auto& x : v) x = static_cast<float>(normal() * stddev);
}
void SplitRng::fill_normal(std::vector<double>& v, double stddev) {
  for (auto& x : v) x = normal() * stddev;
}
void SplitRng::fill_uniform(std::vector<float>& v, double lo, double hi) {
  for (auto& x : v) x = static_cast<float>(uniform(lo, hi));
}
void SplitRng::fill_uniform(std::vector<double>& v, double lo, double hi) {
  for (auto& x : v) x = uniform(lo, hi);
}

std::vector<int64_t> SplitRng::permutation(int64_t n) {
  std::vector<int64_t> idx(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  for (int64_t i = n - 1; i > 0; --i) {
    uint64_t j = uniform_int(static_cast<uint64_t>(i + 1));
    std::swap(idx[static_cast<size_t>(i)], idx[j]);
  }
  return idx;
}

}  // namespace dyrep
