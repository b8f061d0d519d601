#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace rebalance {

/// Derives an independent stream seed from the experiment seed and a stage tag
/// ("select", "init", "shuffle", ...). All randomness in the toolkit flows
/// through this so one seed reproduces a whole run.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);

/// Seeded generator whose outputs are identical on every platform.
/// std::mt19937_64 is specified bit-exactly; the std distributions are not,
/// so bounded integers and normals are drawn by hand here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform integer in [0, bound). bound must be > 0.
  std::uint64_t uniform_index(std::uint64_t bound);

  /// Uniform real in [0, 1).
  double uniform();

  double normal(double mean, double stddev);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_index(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Uniform random k-subset of indices [0, n), returned in ascending order.
std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, Rng& rng);

}  // namespace rebalance
