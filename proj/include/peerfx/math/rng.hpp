#pragma once

#include <cstdint>
#include <vector>

#include "peerfx/math/normal.hpp"

namespace peerfx {

/// Counter-based generator built on the splitmix64 output function
/// (Steele, Lea & Flood 2014; the finalizer is Stafford's mix13).
/// State is a plain 64-bit counter advanced by the golden-ratio
/// increment, so the k-th draw from a given seed is the same on every
/// platform and streams can be split by hashing (seed, stream id).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform on [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in {lo, ..., hi} inclusive.
  int uniform_int(int lo, int hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

  /// Standard normal by inverse-CDF; one uniform per draw keeps the
  /// stream position predictable (no rejection).
  double normal() {
    double u;
    do {
      u = uniform();
    } while (u <= 0.0);
    return norm_quantile(u);
  }

  /// Poisson by inversion (sequential search); fine for small rates.
  int poisson(double rate) {
    const double u = uniform();
    double p = std::exp(-rate);
    double cum = p;
    int k = 0;
    while (u > cum && k < 10000) {
      ++k;
      p *= rate / k;
      cum += p;
    }
    return k;
  }

  /// Sample k distinct values from {0, ..., pool-1} excluding `self`.
  /// Partial Fisher-Yates over an index vector.
  std::vector<int> sample_without_replacement(int pool, int k, int self) {
    std::vector<int> idx;
    idx.reserve(pool - 1);
    for (int j = 0; j < pool; ++j)
      if (j != self) idx.push_back(j);
    std::vector<int> out(k);
    for (int d = 0; d < k; ++d) {
      const int pick = uniform_int(d, static_cast<int>(idx.size()) - 1);
      std::swap(idx[d], idx[pick]);
      out[d] = idx[d];
    }
    return out;
  }

  /// Derive an independent stream for (seed, id): the id is mixed
  /// through the same finalizer before seeding, so streams for
  /// different replications never overlap in practice.
  static Rng stream(std::uint64_t seed, std::uint64_t id) {
    Rng h(seed ^ (0xD1B54A32D192ED03ULL * (id + 1)));
    const std::uint64_t mixed = h.next_u64();
    return Rng(mixed);
  }

 private:
  std::uint64_t state_;
};

}  // namespace peerfx
