#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rebalance/checkpoint.hpp"
#include "rebalance/dataset.hpp"
#include "rebalance/features.hpp"
#include "rebalance/network.hpp"

namespace rebalance {

/// Class index of the starved class in the target head; the large class is 0.
inline constexpr int kStarvedClass = 1;
inline constexpr int kLargeClass = 0;

enum class ClassWeightMode { none, inverse_frequency };

enum class ModelKind {
  stm,
  plain_subsampled,
  class_weighted,
  finetune_imbalanced,
  finetune_subsampled,
  nearest_neighbor,
};

std::string_view to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& token);

struct TrainConfig {
  int epochs = 15;
  int target_batch = 32;
  int source_batch = 16;
  double lr = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;
  int upsample_factor = 10;
  bool hflip_replicas = false;
  ClassWeightMode class_weight_mode = ClassWeightMode::none;
  int pretrain_epochs = 30;
};

/// Throws UsageError on out-of-range fields or source_batch > target_batch.
void validate(const TrainConfig& cfg);

/// Images with integer labels. For target sets, labels are kStarvedClass /
/// kLargeClass; for source sets, category indices.
struct ExampleSet {
  std::vector<std::int64_t> ids;
  std::vector<std::shared_ptr<const ImagePatch>> images;
  std::vector<int> labels;

  std::size_t size() const { return ids.size(); }
  void add(std::int64_t id, std::shared_ptr<const ImagePatch> image, int label);
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double target_loss = 0.0;
  std::optional<double> source_loss;
  double val_pr_auc = 0.0;
  std::filesystem::path checkpoint;
};
using EpochHistory = std::vector<EpochRecord>;

/// Observation hooks used by audits; copies parameters only when set.
struct TrainObserver {
  /// Indices (into the upsampled target set or the supplement) of each batch.
  std::function<void(Head, const std::vector<std::size_t>&)> on_batch;
  std::function<void(Head, const ParamSet& before, const ParamSet& after)> on_step;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainOptions {
  /// Writes epoch_<k>.ckpt per epoch and best.ckpt when non-empty.
  std::filesystem::path checkpoint_dir;
  TrainObserver observer;
};

struct TrainResult {
  /// Deployed form: target head only.
  Checkpoint best;
  EpochHistory history;
  std::size_t best_epoch = 0;  // 0-based index into history
};

/// Stratified train/val split of a labeled target set (see stratified_split).
struct TargetSplit {
  ExampleSet train;
  ExampleSet val;
};
TargetSplit split_examples(const ExampleSet& target, double val_fraction, std::uint64_t seed);

/// Supplement images labeled by category index; categories sorted ascending.
struct Supplement {
  ExampleSet examples;
  std::vector<std::string> categories;
};
Supplement make_supplement(const std::vector<std::int64_t>& ids,
                           const std::vector<std::shared_ptr<const ImagePatch>>& images,
                           const std::vector<std::string>& categories);

/// w_c = n_total / (2 n_c) over the two target classes.
std::vector<double> inverse_frequency_weights(const ExampleSet& target);

/// Starved records repeated `factor` times (replicas share the image).
ExampleSet upsample_examples(const ExampleSet& target, int factor, bool hflip_replicas = false);

/// Large records subsampled to round(ratio * starved), seeded.
ExampleSet subsample_examples(const ExampleSet& target, double ratio, std::uint64_t seed);

/// Alternates one target-batch update (trunk + target head) with one
/// source-batch update (trunk + source head) drawn cyclically from the
/// supplement. The returned checkpoint is the best validation epoch with the
/// source head removed. `spec` must carry a source head sized to the number of
/// supplement categories; target_train is upsampled per cfg.
TrainResult train_stm(const ExampleSet& target_train, const ExampleSet& val,
                      const ExampleSet& supplement, const NetworkSpec& spec, const TrainConfig& cfg,
                      const TrainOptions& options = {});

struct PretrainResult {
  /// Trunk and source head trained; target head freshly re-seeded.
  ParamSet params;
  std::vector<double> epoch_losses;
};

/// Category classification on the source set with trunk + source head.
PretrainResult pretrain_on_source(const NetworkSpec& spec, const ExampleSet& source_train, int epochs,
                                  const TrainConfig& cfg);

/// CNN baselines. Fine-tune kinds require `pretrained` (the output of
/// pretrain_on_source for a spec with the same trunk).
TrainResult train_baseline(ModelKind kind, const ExampleSet& target_train, const ExampleSet& val,
                           const NetworkSpec& spec, const TrainConfig& cfg,
                           const ParamSet* pretrained = nullptr, const TrainOptions& options = {});

/// d_large / (d_starved + d_large); 0.5 when both distances vanish.
double nn_score(const std::vector<FeatureVector>& starved_refs,
                const std::vector<FeatureVector>& large_refs, const FeatureVector& query);

/// Argmax of val_pr_auc, earliest on ties.
std::size_t select_best_epoch(const EpochHistory& history);

/// Softmax probability of the starved class per image, in input order.
std::vector<double> score_images(const NetworkSpec& spec, const ParamSet& params,
                                 const std::vector<std::shared_ptr<const ImagePatch>>& images);

struct ScoredId {
  std::int64_t id = 0;
  double score = 0.0;
};
std::vector<ScoredId> evaluate(const Checkpoint& checkpoint, const ExampleSet& test);

/// Average precision of the model on a labeled target set.
double validation_ap(const NetworkSpec& spec, const ParamSet& params, const ExampleSet& val);

void write_history_csv(const std::filesystem::path& path, const EpochHistory& history);

}  // namespace rebalance
