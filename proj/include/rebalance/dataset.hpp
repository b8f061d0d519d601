#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rebalance/image_io.hpp"

namespace rebalance {

enum class Role { target, source };
enum class Split { train, val, test };
enum class TargetLabel { starved, large };

std::string_view to_string(Role role);
std::string_view to_string(Split split);
std::string_view to_string(TargetLabel label);

struct SampleRecord {
  std::int64_t id = 0;
  std::filesystem::path image_path;
  Role role = Role::target;
  Split split = Split::train;
  /// Set iff role == target.
  std::optional<TargetLabel> target_label;
  /// Non-empty iff role == source.
  std::string category;
  /// Replica augmentation; applied after resizing.
  bool hflip = false;

  bool is_starved() const { return role == Role::target && target_label == TargetLabel::starved; }
  bool is_large() const { return role == Role::target && target_label == TargetLabel::large; }
  std::string label_token() const;

  bool operator==(const SampleRecord&) const = default;
};

struct DatasetManifest {
  std::vector<SampleRecord> records;
  /// Surveyed area per split, strictly positive when present.
  std::map<Split, double> survey_area_km2;
  PatchSize patch_size{};
  /// Relative image paths resolve against this directory.
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const SampleRecord& record) const;
  std::int64_t max_id() const;

  bool operator==(const DatasetManifest&) const = default;
};

/// Reads `id,path,role,split,label` CSV. A sidecar `<stem>.json` next to the
/// CSV may carry `survey_area_km2` and `patch_size`.
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Parses manifest CSV text; `source_name` is used in error messages.
DatasetManifest parse_manifest_csv(std::istream& in, const std::string& source_name);

/// Writes the CSV (and the sidecar when area or patch size is set).
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Throws IngestError if any type invariant is violated.
void validate_manifest(const DatasetManifest& manifest);

ImagePatch load_image(const SampleRecord& record, const std::filesystem::path& resolved_path,
                      PatchSize patch_size);

/// Loads the patch for every record, in record order. workers = 0 picks the
/// hardware concurrency.
std::vector<ImagePatch> load_patches(const DatasetManifest& manifest,
                                     const std::vector<SampleRecord>& records,
                                     std::size_t workers = 0);

std::vector<SampleRecord> select_records(const DatasetManifest& manifest, Role role, Split split);

struct ClassCounts {
  std::size_t starved = 0;
  std::size_t large = 0;
};
ClassCounts count_target(const DatasetManifest& manifest, Split split);

/// Each train-split starved record appears `factor` times; replicas get fresh
/// ids above the current maximum and are listed right after their original.
DatasetManifest upsample_starved(const DatasetManifest& manifest, int factor,
                                 bool hflip_replicas = false);

/// Keeps a seeded uniform subset of round(ratio * starved) large train
/// records, capped at what is available.
DatasetManifest subsample_large(const DatasetManifest& manifest, double ratio,
                                std::uint64_t seed);

/// Moves round(val_fraction * n_c) train records of each target class to val.
DatasetManifest stratified_split(const DatasetManifest& manifest, double val_fraction,
                                 std::uint64_t seed);

}  // namespace rebalance
