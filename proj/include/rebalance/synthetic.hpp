#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rebalance/dataset.hpp"
#include "rebalance/rng.hpp"
#include "rebalance/training.hpp"

namespace rebalance::synthetic {

/// A sonar-flavoured toy world. Starved targets are slatted boxes casting a
/// shadow on a speckled seabed; the large class is seabed clutter (rocks,
/// ripples, debris, solid boxes). The source pool holds unrelated labeled
/// shape categories on plain backgrounds, some of which share the targets'
/// bar-like edge structure.
struct Config {
  int patch = 64;
  std::size_t starved_train = 50;
  std::size_t large_train = 5000;
  std::size_t starved_test = 100;
  std::size_t large_test = 2000;
  std::size_t source_per_category = 250;
  std::uint64_t seed = 0;
};

const std::vector<std::string>& source_categories();

ImagePatch make_starved(int patch, Rng& rng);
ImagePatch make_large(int patch, Rng& rng);
ImagePatch make_source(std::size_t category, int patch, Rng& rng);

struct Task {
  ExampleSet target_train;
  ExampleSet target_test;
  /// Labels index into source_categories().
  ExampleSet source;
};

/// Ids: target train from 1, then target test, then source.
Task generate(const Config& config);

/// Writes images/<id>.pgm and manifest.csv (+ sidecar) under `dir`.
DatasetManifest write_task(const Task& task, const std::filesystem::path& dir, int patch,
                           double test_area_km2 = 0.0);

}  // namespace rebalance::synthetic
