#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace dyrep {

// Deterministic counter-free PRNG with named substreams. Every source of
// randomness in a run derives from one root seed by splitting on a path of
// names/indices, so any stream can be reconstructed from (seed, path) alone.
// The generator is xoshiro256** seeded through splitmix64; all draws are
// identical across platforms and builds.
class SplitRng {
 public:
  SplitRng() : SplitRng(0) {}
  explicit SplitRng(uint64_t seed);

  // Derives an independent child stream; does not advance this stream.
  SplitRng split(std::string_view name) const;
  SplitRng split(uint64_t index) const;

  uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  // Uniform integer in [0, n), n >= 1.
  uint64_t uniform_int(uint64_t n);
  // Standard normal via Box-Muller (pairs cached).
  double normal();

  void fill_normal(std::vector<float>& v, double stddev);
  void fill_normal(std::vector<double>& v, double stddev);
  void fill_uniform(std::vector<float>& v, double lo, double hi);
  void fill_uniform(std::vector<double>& v, double lo, double hi);

  // Fisher-Yates shuffle of indices [0, n).
  std::vector<int64_t> permutation(int64_t n);

  bool coin() { return (next_u64() >> 63) != 0; }

  uint64_t key() const { return key_; }

 private:
  uint64_t key_ = 0;  // identity of this stream, used for splitting
  uint64_t s_[4];
  double cached_normal_ = 0.0;
  bool has_cached_ = false;
};

// FNV-1a, used for stream keys and config hashing.
uint64_t fnv1a64(std::string_view bytes, uint64_t basis = 0xcbf29ce484222325ULL);
uint64_t fnv1a64_mix(uint64_t a, uint64_t b);

}  // namespace dyrep
