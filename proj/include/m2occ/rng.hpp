#pragma once

#include <cstdint>
#include <vector>

namespace m2occ {

std::uint64_t splitmix64(std::uint64_t x);

// Counter-based generator: the i-th draw is a pure function of (key, i), so a
// stream can be recreated from its key alone.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(splitmix64(key)) {}

  std::uint64_t next_u64();
  // Uniform integer in [0, bound), unbiased by rejection.
  std::uint64_t below(std::uint64_t bound);
  double uniform();  // [0, 1) with 53 random bits
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();   // Box-Muller, standard normal

  std::uint64_t counter() const { return counter_; }
  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// Uniform k-subset of {0..n-1}, returned sorted.
std::vector<std::size_t> sample_subset(CounterRng& rng, std::size_t n, std::size_t k);

}  // namespace m2occ
