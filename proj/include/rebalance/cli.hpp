#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "rebalance/dataset.hpp"
#include "rebalance/features.hpp"
#include "rebalance/network.hpp"
#include "rebalance/selection.hpp"
#include "rebalance/training.hpp"

namespace rebalance::cli {

/// Parsed and validated experiment config. Relative paths in the JSON file
/// resolve against the file's directory.
struct ExperimentConfig {
  std::filesystem::path manifest_path;
  std::filesystem::path output_dir;
  std::uint64_t seed = 0;
  ModelKind model_kind = ModelKind::stm;
  std::vector<GaborParams> bank;
  int bins = kDefaultBins;
  SelectionConfig selection;
  /// Deployed form sized to the manifest patch; source heads are added per run.
  NetworkSpec network;
  TrainConfig train;
  double far_cutoff = 1.0;
  DatasetManifest manifest;
};

ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::optional<std::filesystem::path>& out_override = {},
                             const std::optional<std::uint64_t>& seed_override = {});

/// Output file names inside output_dir.
inline constexpr const char* kFeatureCacheFile = "features.csv";
inline constexpr const char* kSelectionFile = "selection.csv";
inline constexpr const char* kHistoryFile = "history.csv";
inline constexpr const char* kBestCheckpointFile = "best.ckpt";
inline constexpr const char* kNearestRefsFile = "nn_refs.csv";
inline constexpr const char* kScoresFile = "scores.csv";
inline constexpr const char* kReportFile = "report.json";
inline constexpr const char* kLockFile = ".rebalance.lock";

void cmd_features(const ExperimentConfig& cfg, std::ostream& log);
void cmd_select(const ExperimentConfig& cfg, std::ostream& log);
void cmd_train(const ExperimentConfig& cfg, std::ostream& log);
void cmd_eval(const ExperimentConfig& cfg, std::ostream& log);

/// Target train/val after the seeded stratified split; the split is skipped
/// when the manifest already holds val records.
DatasetManifest with_validation_split(const ExperimentConfig& cfg);

/// Entry point of the `rebalance` tool; returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace rebalance::cli
