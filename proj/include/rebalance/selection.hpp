#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include "rebalance/features.hpp"

namespace rebalance {

struct SelectionConfig {
  /// Stage-1 shortlist size (closest to the starved class).
  std::size_t n_closest = 400;
  /// Stage-2 keep count (farthest from the large class).
  std::size_t m_farthest = 200;
  /// Size of the random source subsample the distances are computed on.
  std::size_t subsample_k = 2000;
  /// Upper bound on large-class exemplars used as distance references.
  std::size_t large_ref_cap = 5000;
  std::uint64_t seed = 0;
};

/// Throws UsageError unless 1 <= M <= N <= subsample_k and large_ref_cap >= 1.
void validate(const SelectionConfig& cfg);

struct SelectionResult {
  /// U, ordered by descending distance to the large class.
  std::vector<std::int64_t> selected_ids;
  /// Stage-1 survivors, ordered by ascending distance to the starved class.
  std::vector<std::int64_t> shortlist_ids;
  std::map<std::int64_t, double> d_starved;
  /// Shortlist members only.
  std::map<std::int64_t, double> d_large;
};

/// Seeded uniform subset of size min(k, |ids|) in ascending id order. The
/// result does not depend on the order of `ids`.
std::vector<std::int64_t> subsample_source(std::vector<std::int64_t> ids, std::size_t k,
                                           std::uint64_t seed);

double l2_distance(std::span<const double> u, std::span<const double> v);
double l2_distance(const FeatureVector& u, const FeatureVector& v);

struct NearestReference {
  double distance = 0.0;
  std::size_t index = 0;
};

/// Minimum distance to any reference; ties go to the lowest index.
NearestReference min_dist_to_class(const FeatureVector& v, const std::vector<FeatureVector>& refs);

/// Two-stage selection: keep the N candidates closest to any starved
/// reference, then the M of those farthest from every large reference.
/// Ties break by ascending candidate id throughout.
SelectionResult select_supplement(const std::map<std::int64_t, FeatureVector>& candidates,
                                  const std::vector<FeatureVector>& starved_refs,
                                  const std::vector<FeatureVector>& large_refs,
                                  const SelectionConfig& cfg, std::size_t workers = 1);

/// `id,stage,d_starved,d_large`, one row per shortlist member in stage-2 order;
/// stage is `selected` for members of U and `shortlist` otherwise.
void write_selection_csv(const std::filesystem::path& path, const SelectionResult& result);
SelectionResult read_selection_csv(const std::filesystem::path& path);

}  // namespace rebalance
