#include "rebalance/training.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "rebalance/error.hpp"
#include "rebalance/format.hpp"
#include "rebalance/metrics.hpp"
#include "rebalance/rng.hpp"
#include "rebalance/selection.hpp"

namespace rebalance {

namespace {

constexpr std::size_t kScoreChunk = 256;

// The dataset bookkeeping operates on manifests; example sets are routed
// through a throwaway manifest whose image paths are indices into the set.
DatasetManifest as_manifest(const ExampleSet& set) {
  DatasetManifest m;
  for (std::size_t i = 0; i < set.size(); ++i) {
    SampleRecord r;
    r.id = set.ids[i];
    r.image_path = std::to_string(i);
    r.role = Role::target;
    r.split = Split::train;
    r.target_label = set.labels[i] == kStarvedClass ? TargetLabel::starved : TargetLabel::large;
    m.records.push_back(std::move(r));
  }
  return m;
}

ExampleSet from_manifest(const ExampleSet& set, const DatasetManifest& m) {
  ExampleSet out;
  std::map<std::size_t, std::shared_ptr<const ImagePatch>> flipped;
  for (const auto& r : m.records) {
    const auto i = static_cast<std::size_t>(std::stoull(r.image_path.string()));
    auto image = set.images[i];
    if (r.hflip) {
      auto& f = flipped[i];
      if (!f) f = std::make_shared<const ImagePatch>(flip_horizontal(*image));
      image = f;
    }
    out.add(r.id, image, set.labels[i]);
  }
  return out;
}

void require_both_classes(const ExampleSet& set, const char* what) {
  const auto starved = std::count(set.labels.begin(), set.labels.end(), kStarvedClass);
  const auto large = std::count(set.labels.begin(), set.labels.end(), kLargeClass);
  if (starved == 0 || large == 0) {
    throw UsageError(std::string(what) + " must contain both starved and large examples");
  }
  if (static_cast<std::size_t>(starved + large) != set.size()) {
    throw UsageError(std::string(what) + " has labels outside {large, starved}");
  }
}

Batch make_batch(const ExampleSet& set, const std::vector<std::size_t>& indices,
                 const std::vector<double>& class_weights) {
  const auto& first = *set.images[indices.front()];
  const auto H = static_cast<std::size_t>(first.height), W = static_cast<std::size_t>(first.width);
  Batch batch;
  batch.inputs = Tensor({indices.size(), 1, H, W});
  batch.class_weights = class_weights;
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& img = *set.images[indices[b]];
    if (static_cast<std::size_t>(img.height) != H || static_cast<std::size_t>(img.width) != W) {
      throw UsageError("batch images differ in size");
    }
    std::copy(img.pixels.begin(), img.pixels.end(), batch.inputs.data.begin() + static_cast<std::ptrdiff_t>(b * H * W));
    batch.labels.push_back(set.labels[indices[b]]);
  }
  return batch;
}

void check_input_size(const NetworkSpec& spec, const ExampleSet& set, const char* what) {
  for (const auto& img : set.images) {
    if (img->height != spec.input_height || img->width != spec.input_width) {
      throw CompatibilityError(std::string(what) + " patch size " + std::to_string(img->height) + "x" +
                               std::to_string(img->width) + " does not match network input " +
                               std::to_string(spec.input_height) + "x" + std::to_string(spec.input_width));
    }
  }
}

// Shared epoch loop. With `supplement`, each target step is followed by one
// source step.
TrainResult run_training(const NetworkSpec& spec, ParamSet params, const ExampleSet& target,
                         const ExampleSet& val, const ExampleSet* supplement, const TrainConfig& cfg,
                         const std::vector<double>& class_weights, const TrainOptions& options) {
  const NetworkSpec deployed_spec = without_source_head(spec);
  const auto& obs = options.observer;
  Rng target_rng(derive_seed(cfg.seed, "target-shuffle"));
  Rng source_rng(derive_seed(cfg.seed, "source-shuffle"));
  std::vector<std::size_t> source_order;
  std::size_t source_cursor = 0;

  auto next_source_batch = [&] {
    std::vector<std::size_t> idx;
    while (idx.size() < static_cast<std::size_t>(cfg.source_batch)) {
      if (source_cursor == source_order.size()) {
        source_order.resize(supplement->size());
        std::iota(source_order.begin(), source_order.end(), std::size_t{0});
        source_rng.shuffle(source_order);
        source_cursor = 0;
      }
      idx.push_back(source_order[source_cursor++]);
    }
    return idx;
  };

  auto step = [&](Head head, const Batch& batch) {
    auto lg = loss_and_grads(spec, params, batch, head);
    if (obs.on_step) {
      const ParamSet before = params;
      sgd_step(params, lg.grads, cfg.lr, cfg.momentum);
      obs.on_step(head, before, params);
    } else {
      sgd_step(params, lg.grads, cfg.lr, cfg.momentum);
    }
    return lg.loss;
  };

  if (!options.checkpoint_dir.empty()) std::filesystem::create_directories(options.checkpoint_dir);

  TrainResult result;
  ParamSet best_params = params;
  double best_ap = -1.0;
  std::vector<std::size_t> order(target.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    target_rng.shuffle(order);
    double target_sum = 0.0, source_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.target_batch)) {
      const auto stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.target_batch));
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(stop));
      if (obs.on_batch) obs.on_batch(Head::target, idx);
      target_sum += step(Head::target, make_batch(target, idx, class_weights));
      if (supplement) {
        const auto sidx = next_source_batch();
        if (obs.on_batch) obs.on_batch(Head::source, sidx);
        source_sum += step(Head::source, make_batch(*supplement, sidx, {}));
      }
      ++steps;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.target_loss = target_sum / static_cast<double>(steps);
    if (supplement) rec.source_loss = source_sum / static_cast<double>(steps);
    rec.val_pr_auc = validation_ap(spec, params, val);
    if (!options.checkpoint_dir.empty()) {
      rec.checkpoint = options.checkpoint_dir / ("epoch_" + std::to_string(epoch) + ".ckpt");
      save_checkpoint(spec, params, rec.checkpoint);
    }
    if (rec.val_pr_auc > best_ap) {
      best_ap = rec.val_pr_auc;
      best_params = params;
    }
    result.history.push_back(rec);
    if (obs.on_epoch) obs.on_epoch(rec);
  }

  result.best_epoch = select_best_epoch(result.history);
  result.best = {deployed_spec, drop_head(best_params, Head::source)};
  if (!options.checkpoint_dir.empty()) {
    save_checkpoint(result.best.spec, result.best.params, options.checkpoint_dir / "best.ckpt");
  }
  return result;
}

std::vector<double> weights_for(const TrainConfig& cfg, const ExampleSet& target) {
  if (cfg.class_weight_mode == ClassWeightMode::inverse_frequency) return inverse_frequency_weights(target);
  return {};
}

}  // namespace

std::string_view to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::stm: return "stm";
    case ModelKind::plain_subsampled: return "plain_subsampled";
    case ModelKind::class_weighted: return "class_weighted";
    case ModelKind::finetune_imbalanced: return "finetune_imbalanced";
    case ModelKind::finetune_subsampled: return "finetune_subsampled";
    case ModelKind::nearest_neighbor: return "nearest_neighbor";
  }
  return "?";
}

ModelKind parse_model_kind(const std::string& token) {
  for (auto k : {ModelKind::stm, ModelKind::plain_subsampled, ModelKind::class_weighted,
                 ModelKind::finetune_imbalanced, ModelKind::finetune_subsampled, ModelKind::nearest_neighbor}) {
    if (to_string(k) == token) return k;
  }
  throw UsageError("unknown model kind '" + token + "'");
}

void validate(const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw UsageError("train: epochs must be >= 1");
  if (cfg.target_batch < 1 || cfg.source_batch < 1) throw UsageError("train: batch sizes must be >= 1");
  if (cfg.source_batch > cfg.target_batch) throw UsageError("train: source_batch must not exceed target_batch");
  if (!(cfg.lr > 0.0)) throw UsageError("train: lr must be positive");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw UsageError("train: momentum must lie in [0, 1)");
  if (!(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0)) throw UsageError("train: val_fraction must lie in (0, 1)");
  if (cfg.upsample_factor < 1) throw UsageError("train: upsample_factor must be >= 1");
  if (cfg.pretrain_epochs < 0) throw UsageError("train: pretrain_epochs must be >= 0");
}

void ExampleSet::add(std::int64_t id, std::shared_ptr<const ImagePatch> image, int label) {
  ids.push_back(id);
  images.push_back(std::move(image));
  labels.push_back(label);
}

std::vector<double> inverse_frequency_weights(const ExampleSet& target) {
  require_both_classes(target, "class-weighted training data");
  const auto starved = static_cast<double>(std::count(target.labels.begin(), target.labels.end(), kStarvedClass));
  const auto total = static_cast<double>(target.size());
  const double large = total - starved;
  std::vector<double> w(2);
  w[kStarvedClass] = total / (2.0 * starved);
  w[kLargeClass] = total / (2.0 * large);
  return w;
}

TargetSplit split_examples(const ExampleSet& target, double val_fraction, std::uint64_t seed) {
  const DatasetManifest m = stratified_split(as_manifest(target), val_fraction, seed);
  DatasetManifest train, val;
  for (const auto& r : m.records) (r.split == Split::val ? val : train).records.push_back(r);
  return {from_manifest(target, train), from_manifest(target, val)};
}

Supplement make_supplement(const std::vector<std::int64_t>& ids,
                           const std::vector<std::shared_ptr<const ImagePatch>>& images,
                           const std::vector<std::string>& categories) {
  if (ids.size() != images.size() || ids.size() != categories.size()) {
    throw UsageError("make_supplement: ids, images and categories differ in length");
  }
  Supplement out;
  const std::set<std::string> names(categories.begin(), categories.end());
  out.categories.assign(names.begin(), names.end());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (categories[i].empty()) throw UsageError("supplement record " + std::to_string(ids[i]) + " has no category");
    const auto it = std::lower_bound(out.categories.begin(), out.categories.end(), categories[i]);
    out.examples.add(ids[i], images[i], static_cast<int>(it - out.categories.begin()));
  }
  return out;
}

ExampleSet upsample_examples(const ExampleSet& target, int factor, bool hflip_replicas) {
  return from_manifest(target, upsample_starved(as_manifest(target), factor, hflip_replicas));
}

ExampleSet subsample_examples(const ExampleSet& target, double ratio, std::uint64_t seed) {
  return from_manifest(target, subsample_large(as_manifest(target), ratio, seed));
}

TrainResult train_stm(const ExampleSet& target_train, const ExampleSet& val, const ExampleSet& supplement,
                      const NetworkSpec& spec, const TrainConfig& cfg, const TrainOptions& options) {
  validate(cfg);
  validate(spec);
  if (supplement.size() == 0) throw UsageError("train_stm: the supplemental set U is empty");
  require_both_classes(target_train, "target training data");
  require_both_classes(val, "validation data");
  if (spec.source_head.empty()) throw UsageError("train_stm: spec has no source head");
  const int classes = spec.source_head.back().units;
  for (int label : supplement.labels) {
    if (label < 0 || label >= classes) throw UsageError("train_stm: supplement label outside the source head");
  }
  check_input_size(spec, target_train, "target");
  check_input_size(spec, supplement, "supplement");

  const ExampleSet target = upsample_examples(target_train, cfg.upsample_factor, cfg.hflip_replicas);
  ParamSet params = init_params(spec, derive_seed(cfg.seed, "init"));
  return run_training(spec, std::move(params), target, val, &supplement, cfg, weights_for(cfg, target), options);
}

PretrainResult pretrain_on_source(const NetworkSpec& spec, const ExampleSet& source_train, int epochs,
                                  const TrainConfig& cfg) {
  validate(cfg);
  validate(spec);
  if (epochs < 1) throw UsageError("pretrain: epochs must be >= 1");
  if (spec.source_head.empty()) throw UsageError("pretrain: spec has no source head");
  if (source_train.size() == 0) throw UsageError("pretrain: empty source set");
  for (int label : source_train.labels) {
    if (label < 0) throw UsageError("pretrain: unlabeled source record");
  }
  const int classes = spec.source_head.back().units;
  const std::set<int> distinct(source_train.labels.begin(), source_train.labels.end());
  if (distinct.size() < 2) throw UsageError("pretrain: source set needs at least two categories");
  if (*distinct.rbegin() >= classes) throw UsageError("pretrain: category index exceeds source head width");
  check_input_size(spec, source_train, "source");

  PretrainResult out;
  out.params = init_params(spec, derive_seed(cfg.seed, "pretrain-init"));
  Rng rng(derive_seed(cfg.seed, "pretrain-shuffle"));
  std::vector<std::size_t> order(source_train.size());
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    double sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.target_batch)) {
      const auto stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.target_batch));
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(stop));
      auto lg = loss_and_grads(spec, out.params, make_batch(source_train, idx, {}), Head::source);
      sgd_step(out.params, lg.grads, cfg.lr, cfg.momentum);
      sum += lg.loss;
      ++steps;
    }
    out.epoch_losses.push_back(sum / static_cast<double>(steps));
  }
  reinit_head(spec, out.params, Head::target, derive_seed(cfg.seed, "finetune-head"));
  return out;
}

TrainResult train_baseline(ModelKind kind, const ExampleSet& target_train, const ExampleSet& val,
                           const NetworkSpec& spec, const TrainConfig& cfg, const ParamSet* pretrained,
                           const TrainOptions& options) {
  if (kind == ModelKind::stm || kind == ModelKind::nearest_neighbor) {
    throw UsageError("train_baseline: kind " + std::string(to_string(kind)) + " is not a CNN baseline");
  }
  validate(cfg);
  validate(spec);
  require_both_classes(target_train, "target training data");
  require_both_classes(val, "validation data");
  const NetworkSpec deployed = without_source_head(spec);
  check_input_size(deployed, target_train, "target");

  ExampleSet target = upsample_examples(target_train, cfg.upsample_factor, cfg.hflip_replicas);
  const bool subsampled = kind == ModelKind::plain_subsampled || kind == ModelKind::finetune_subsampled;
  if (subsampled) target = subsample_examples(target, 1.0, derive_seed(cfg.seed, "subsample"));

  ParamSet params;
  if (kind == ModelKind::finetune_imbalanced || kind == ModelKind::finetune_subsampled) {
    if (!pretrained) throw UsageError("train_baseline: fine-tune kinds need pretrained parameters");
    params = drop_head(*pretrained, Head::source);
    check_params_match(deployed, params);
    for (auto& slot : params.slots) std::fill(slot.momentum.data.begin(), slot.momentum.data.end(), 0.0);
  } else {
    params = init_params(deployed, derive_seed(cfg.seed, "init"));
  }

  std::vector<double> weights;
  if (kind == ModelKind::class_weighted || kind == ModelKind::finetune_imbalanced) {
    weights = inverse_frequency_weights(target);
  }
  return run_training(deployed, std::move(params), target, val, nullptr, cfg, weights, options);
}

double nn_score(const std::vector<FeatureVector>& starved_refs, const std::vector<FeatureVector>& large_refs,
                const FeatureVector& query) {
  if (starved_refs.empty() || large_refs.empty()) throw UsageError("nn_score: empty reference list");
  const double ds = min_dist_to_class(query, starved_refs).distance;
  const double dl = min_dist_to_class(query, large_refs).distance;
  if (ds + dl == 0.0) return 0.5;
  return dl / (ds + dl);
}

std::size_t select_best_epoch(const EpochHistory& history) {
  if (history.empty()) throw UsageError("select_best_epoch: empty history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (history[i].val_pr_auc > history[best].val_pr_auc) best = i;
  }
  return best;
}

std::vector<double> score_images(const NetworkSpec& spec, const ParamSet& params,
                                 const std::vector<std::shared_ptr<const ImagePatch>>& images) {
  std::vector<double> scores;
  scores.reserve(images.size());
  const auto H = static_cast<std::size_t>(spec.input_height), W = static_cast<std::size_t>(spec.input_width);
  for (std::size_t start = 0; start < images.size(); start += kScoreChunk) {
    const std::size_t stop = std::min(images.size(), start + kScoreChunk);
    Tensor inputs({stop - start, 1, H, W});
    for (std::size_t i = start; i < stop; ++i) {
      const auto& img = *images[i];
      if (static_cast<std::size_t>(img.height) != H || static_cast<std::size_t>(img.width) != W) {
        throw CompatibilityError("patch size does not match the network input");
      }
      std::copy(img.pixels.begin(), img.pixels.end(),
                inputs.data.begin() + static_cast<std::ptrdiff_t>((i - start) * H * W));
    }
    const Tensor probs = softmax(forward(spec, params, inputs, Head::target).logits);
    for (std::size_t i = 0; i < stop - start; ++i) scores.push_back(probs.data[i * 2 + kStarvedClass]);
  }
  return scores;
}

std::vector<ScoredId> evaluate(const Checkpoint& checkpoint, const ExampleSet& test) {
  const auto scores = score_images(checkpoint.spec, checkpoint.params, test.images);
  std::vector<ScoredId> out;
  for (std::size_t i = 0; i < test.size(); ++i) out.push_back({test.ids[i], scores[i]});
  return out;
}

double validation_ap(const NetworkSpec& spec, const ParamSet& params, const ExampleSet& val) {
  const auto scores = score_images(spec, params, val.images);
  std::vector<ScoredSample> samples;
  for (std::size_t i = 0; i < val.size(); ++i) {
    samples.push_back({val.ids[i], scores[i], val.labels[i] == kStarvedClass});
  }
  return pr_curve(std::move(samples)).average_precision;
}

void write_history_csv(const std::filesystem::path& path, const EpochHistory& history) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot write " + path.string());
  out << "epoch,target_loss,source_loss,val_pr_auc\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << format_double(r.target_loss) << ','
        << (r.source_loss ? format_double(*r.source_loss) : std::string()) << ','
        << format_double(r.val_pr_auc) << '\n';
  }
}

}  // namespace rebalance
