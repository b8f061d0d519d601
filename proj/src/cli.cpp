#include "rebalance/cli.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "rebalance/checkpoint.hpp"
#include "rebalance/error.hpp"
#include "rebalance/format.hpp"
#include "rebalance/metrics.hpp"
#include "rebalance/rng.hpp"

namespace rebalance::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// --- config parsing ----------------------------------------------------------

void check_keys(const json& obj, const std::string& where, const std::set<std::string>& allowed) {
  if (!obj.is_object()) throw UsageError("config: '" + where + "' must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) throw UsageError("config: unknown key '" + where + "." + key + "'");
  }
}

const json* find(const json& obj, const std::string& key) {
  const auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

double get_real(const json& obj, const std::string& where, const std::string& key, double fallback) {
  const json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_number()) throw UsageError("config: '" + where + "." + key + "' must be a number");
  return v->get<double>();
}

std::int64_t get_int(const json& obj, const std::string& where, const std::string& key, std::int64_t fallback) {
  const json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_number_integer()) throw UsageError("config: '" + where + "." + key + "' must be an integer");
  return v->get<std::int64_t>();
}

std::size_t get_count(const json& obj, const std::string& where, const std::string& key, std::size_t fallback) {
  const auto v = get_int(obj, where, key, static_cast<std::int64_t>(fallback));
  if (v < 0) throw UsageError("config: '" + where + "." + key + "' must be non-negative");
  return static_cast<std::size_t>(v);
}

int get_small_int(const json& obj, const std::string& where, const std::string& key, int fallback) {
  const auto v = get_int(obj, where, key, fallback);
  if (v < -1000000000 || v > 1000000000) throw UsageError("config: '" + where + "." + key + "' is out of range");
  return static_cast<int>(v);
}

bool get_bool(const json& obj, const std::string& where, const std::string& key, bool fallback) {
  const json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_boolean()) throw UsageError("config: '" + where + "." + key + "' must be true or false");
  return v->get<bool>();
}

std::string get_string(const json& obj, const std::string& where, const std::string& key) {
  const json* v = find(obj, key);
  if (!v || !v->is_string()) throw UsageError("config: '" + where + key + "' must be a string");
  return v->get<std::string>();
}

GaborParams parse_gabor(const json& j, const std::string& where) {
  check_keys(j, where, {"wavelength_px", "orientation_rad", "sigma_px", "aspect", "phase_rad", "half_width"});
  GaborParams p;
  if (!find(j, "wavelength_px")) throw UsageError("config: '" + where + ".wavelength_px' is required");
  p.wavelength_px = get_real(j, where, "wavelength_px", 0.0);
  p.orientation_rad = get_real(j, where, "orientation_rad", 0.0);
  p.sigma_px = get_real(j, where, "sigma_px", 0.56 * p.wavelength_px);
  p.aspect = get_real(j, where, "aspect", 0.5);
  p.phase_rad = get_real(j, where, "phase_rad", 0.0);
  const double auto_half = std::isfinite(p.sigma_px) ? std::ceil(2.0 * p.sigma_px) + 1.0 : 0.0;
  p.half_width = get_small_int(j, where, "half_width", static_cast<int>(auto_half));
  return p;
}

NetworkSpec parse_network(const json* j, PatchSize patch) {
  if (!j) return default_network_spec(patch.height, patch.width, 0);
  if (j->is_string()) {
    const auto name = j->get<std::string>();
    if (name == "default") return default_network_spec(patch.height, patch.width, 0);
    if (name == "desk") return desk_network_spec(patch.height, patch.width, 0);
    throw UsageError("config: unknown network '" + name + "' (expected default, desk or an inline spec)");
  }
  NetworkSpec spec;
  try {
    spec = network_spec_from_json(*j);
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError(std::string("config: malformed inline network: ") + e.what());
  }
  if (spec.input_channels != 1 || spec.input_height != patch.height || spec.input_width != patch.width) {
    throw UsageError("config: inline network input does not match the manifest patch size");
  }
  return without_source_head(spec);
}

// --- output directory lock ---------------------------------------------------

class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) : path_(dir / kLockFile) {
    fs::create_directories(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw UsageError("output directory " + dir.string() + " is locked by another run (" + path_.string() + ")");
    std::fclose(f);
  }
  ~OutputLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
};

// --- shared helpers ----------------------------------------------------------

FeatureCacheMeta wanted_meta(const ExperimentConfig& cfg) {
  return {cfg.bank, cfg.bins, cfg.manifest.patch_size};
}

FeatureCache load_compatible_cache(const ExperimentConfig& cfg) {
  FeatureCache cache = read_feature_cache(cfg.output_dir / kFeatureCacheFile);
  check_cache_compatible(cache.meta, wanted_meta(cfg));
  return cache;
}

ExampleSet load_examples(const DatasetManifest& m, const std::vector<SampleRecord>& records) {
  const auto images = load_patches(m, records);
  ExampleSet set;
  for (std::size_t i = 0; i < records.size(); ++i) {
    set.add(records[i].id, std::make_shared<const ImagePatch>(images[i]),
            records[i].is_starved() ? kStarvedClass : kLargeClass);
  }
  return set;
}

Supplement load_supplement(const DatasetManifest& m, const std::vector<SampleRecord>& records) {
  const auto images = load_patches(m, records);
  std::vector<std::int64_t> ids;
  std::vector<std::shared_ptr<const ImagePatch>> ptrs;
  std::vector<std::string> categories;
  for (std::size_t i = 0; i < records.size(); ++i) {
    ids.push_back(records[i].id);
    ptrs.push_back(std::make_shared<const ImagePatch>(images[i]));
    categories.push_back(records[i].category);
  }
  return make_supplement(ids, ptrs, categories);
}

struct References {
  std::vector<std::int64_t> starved_ids;
  std::vector<std::int64_t> large_ids;
};

// Train-split starved records, and train-split large records capped at
// large_ref_cap by a seeded subset.
References reference_ids(const ExperimentConfig& cfg, const DatasetManifest& m) {
  References refs;
  for (const auto& r : select_records(m, Role::target, Split::train)) {
    (r.is_starved() ? refs.starved_ids : refs.large_ids).push_back(r.id);
  }
  if (refs.starved_ids.empty() || refs.large_ids.empty()) {
    throw IngestError("target train split must contain both starved and large records");
  }
  if (refs.large_ids.size() > cfg.selection.large_ref_cap) {
    Rng rng(derive_seed(cfg.seed, "large-refs"));
    std::vector<std::int64_t> kept;
    for (auto i : sample_indices(refs.large_ids.size(), cfg.selection.large_ref_cap, rng)) {
      kept.push_back(refs.large_ids[i]);
    }
    refs.large_ids = std::move(kept);
  }
  return refs;
}

std::vector<FeatureVector> features_of(const FeatureCache& cache, const std::vector<std::int64_t>& ids) {
  std::vector<FeatureVector> out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(cache.at(id));
  return out;
}

TrainConfig train_config_for(const ExperimentConfig& cfg) {
  TrainConfig t = cfg.train;
  t.seed = cfg.seed;
  return t;
}

void write_nn_refs(const fs::path& path, const References& refs, const FeatureCache& cache) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot write " + path.string());
  const int dim = cache.features.empty() ? 0 : static_cast<int>(cache.features.front().values.size());
  out << "id,class";
  for (int i = 0; i < dim; ++i) out << ",f_" << i;
  out << '\n';
  const auto emit = [&](const std::vector<std::int64_t>& ids, const char* cls) {
    for (auto id : ids) {
      out << id << ',' << cls;
      for (double v : cache.at(id).values) out << ',' << format_double(v);
      out << '\n';
    }
  };
  emit(refs.starved_ids, "starved");
  emit(refs.large_ids, "large");
  if (!out) throw IngestError("failed writing " + path.string());
}

struct NearestRefs {
  std::vector<FeatureVector> starved;
  std::vector<FeatureVector> large;
};

NearestRefs read_nn_refs(const fs::path& path, const FeatureCacheMeta& meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("missing model artifact " + path.string() + "; run `train` first");
  const int filters = static_cast<int>(meta.bank.size());
  const std::size_t dim = static_cast<std::size_t>(filters) * static_cast<std::size_t>(meta.bins);
  NearestRefs refs;
  std::string line;
  std::getline(in, line);
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    std::stringstream ss(line);
    std::string field, cls;
    std::getline(ss, field, ',');
    std::getline(ss, cls, ',');
    FeatureVector fv{{}, filters, meta.bins};
    try {
      while (std::getline(ss, field, ',')) fv.values.push_back(parse_double(field));
    } catch (const std::invalid_argument& e) {
      throw CompatibilityError(path.string() + " row " + std::to_string(row) + ": " + e.what());
    }
    if (fv.values.size() != dim || (cls != "starved" && cls != "large")) {
      throw CompatibilityError(path.string() + " row " + std::to_string(row) +
                               ": does not match the configured feature layout");
    }
    (cls == "starved" ? refs.starved : refs.large).push_back(std::move(fv));
  }
  if (refs.starved.empty() || refs.large.empty()) {
    throw CompatibilityError(path.string() + " must hold references of both classes");
  }
  return refs;
}

void write_scores(const fs::path& path, const std::vector<ScoredId>& scores) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot write " + path.string());
  out << "id,score\n";
  for (const auto& s : scores) out << s.id << ',' << format_double(s.score) << '\n';
}

void write_pretrain_csv(const fs::path& path, const std::vector<double>& losses) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot write " + path.string());
  out << "epoch,source_loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) out << i + 1 << ',' << format_double(losses[i]) << '\n';
}

}  // namespace

ExperimentConfig load_config(const fs::path& path, const std::optional<fs::path>& out_override,
                             const std::optional<std::uint64_t>& seed_override) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  check_keys(j, "config", {"manifest", "output_dir", "seed", "model_kind", "features", "selection",
                           "network", "train", "eval"});
  const fs::path base = path.parent_path();
  const auto resolve = [&](const fs::path& p) { return p.is_absolute() ? p : base / p; };

  ExperimentConfig cfg;
  cfg.manifest_path = resolve(get_string(j, "", "manifest"));
  if (out_override) {
    cfg.output_dir = *out_override;
  } else {
    cfg.output_dir = resolve(get_string(j, "", "output_dir"));
  }
  if (const json* s = find(j, "seed")) {
    if (!s->is_number_unsigned()) throw UsageError("config: 'seed' must be a non-negative integer");
    cfg.seed = s->get<std::uint64_t>();
  }
  if (seed_override) cfg.seed = *seed_override;
  if (const json* k = find(j, "model_kind")) {
    if (!k->is_string()) throw UsageError("config: 'model_kind' must be a string");
    cfg.model_kind = parse_model_kind(k->get<std::string>());
  }

  const json empty = json::object();
  const json& feat = find(j, "features") ? j["features"] : empty;
  check_keys(feat, "features", {"bins", "bank"});
  cfg.bins = get_small_int(feat, "features", "bins", kDefaultBins);
  if (cfg.bins < 1) throw UsageError("config: 'features.bins' must be >= 1");
  const json* bank = find(feat, "bank");
  if (!bank || (bank->is_string() && bank->get<std::string>() == "default")) {
    cfg.bank = default_gabor_params();
  } else if (bank->is_array()) {
    for (std::size_t i = 0; i < bank->size(); ++i) {
      cfg.bank.push_back(parse_gabor((*bank)[i], "features.bank[" + std::to_string(i) + "]"));
    }
  } else {
    throw UsageError("config: 'features.bank' must be \"default\" or a list of filters");
  }
  build_gabor_bank(cfg.bank);

  const json& sel = find(j, "selection") ? j["selection"] : empty;
  check_keys(sel, "selection", {"n_closest", "m_farthest", "subsample_k", "large_ref_cap"});
  cfg.selection.n_closest = get_count(sel, "selection", "n_closest", cfg.selection.n_closest);
  cfg.selection.m_farthest = get_count(sel, "selection", "m_farthest", cfg.selection.m_farthest);
  cfg.selection.subsample_k = get_count(sel, "selection", "subsample_k", cfg.selection.subsample_k);
  cfg.selection.large_ref_cap = get_count(sel, "selection", "large_ref_cap", cfg.selection.large_ref_cap);
  cfg.selection.seed = cfg.seed;
  validate(cfg.selection);

  const json& tr = find(j, "train") ? j["train"] : empty;
  check_keys(tr, "train", {"epochs", "target_batch", "source_batch", "lr", "momentum", "val_fraction",
                           "upsample_factor", "hflip_replicas", "class_weights", "pretrain_epochs"});
  TrainConfig& t = cfg.train;
  t.epochs = get_small_int(tr, "train", "epochs", t.epochs);
  t.target_batch = get_small_int(tr, "train", "target_batch", t.target_batch);
  t.source_batch = get_small_int(tr, "train", "source_batch", t.source_batch);
  t.lr = get_real(tr, "train", "lr", t.lr);
  t.momentum = get_real(tr, "train", "momentum", t.momentum);
  t.val_fraction = get_real(tr, "train", "val_fraction", t.val_fraction);
  t.upsample_factor = get_small_int(tr, "train", "upsample_factor", t.upsample_factor);
  t.hflip_replicas = get_bool(tr, "train", "hflip_replicas", t.hflip_replicas);
  t.pretrain_epochs = get_small_int(tr, "train", "pretrain_epochs", t.pretrain_epochs);
  if (find(tr, "class_weights")) {
    const auto mode = get_string(tr, "train.", "class_weights");
    if (mode == "none") {
      t.class_weight_mode = ClassWeightMode::none;
    } else if (mode == "inverse_frequency") {
      t.class_weight_mode = ClassWeightMode::inverse_frequency;
    } else {
      throw UsageError("config: 'train.class_weights' must be none or inverse_frequency");
    }
  }
  t.seed = cfg.seed;
  validate(t);
  if ((cfg.model_kind == ModelKind::finetune_imbalanced || cfg.model_kind == ModelKind::finetune_subsampled) &&
      t.pretrain_epochs < 1) {
    throw UsageError("config: fine-tune kinds need train.pretrain_epochs >= 1");
  }

  const json& ev = find(j, "eval") ? j["eval"] : empty;
  check_keys(ev, "eval", {"far_cutoff"});
  cfg.far_cutoff = get_real(ev, "eval", "far_cutoff", cfg.far_cutoff);
  if (!(cfg.far_cutoff > 0.0) || !std::isfinite(cfg.far_cutoff)) {
    throw UsageError("config: 'eval.far_cutoff' must be positive");
  }

  if (!fs::exists(cfg.manifest_path)) throw UsageError("config: manifest " + cfg.manifest_path.string() + " does not exist");
  cfg.manifest = load_manifest(cfg.manifest_path);
  cfg.network = parse_network(find(j, "network"), cfg.manifest.patch_size);
  validate(cfg.network);
  return cfg;
}

DatasetManifest with_validation_split(const ExperimentConfig& cfg) {
  if (count_target(cfg.manifest, Split::val).starved + count_target(cfg.manifest, Split::val).large > 0) {
    return cfg.manifest;
  }
  return stratified_split(cfg.manifest, cfg.train.val_fraction, derive_seed(cfg.seed, "val-split"));
}

void cmd_features(const ExperimentConfig& cfg, std::ostream& log) {
  const GaborBank bank = build_gabor_bank(cfg.bank);
  const auto& records = cfg.manifest.records;
  const auto images = load_patches(cfg.manifest, records);
  FeatureCache cache;
  cache.meta = wanted_meta(cfg);
  for (const auto& r : records) cache.ids.push_back(r.id);
  cache.features = extract_features(images, bank, cfg.bins);
  write_feature_cache(cfg.output_dir / kFeatureCacheFile, cache);
  log << "features: " << cache.ids.size() << " records x "
      << bank.size() * static_cast<std::size_t>(cfg.bins) << " values -> "
      << (cfg.output_dir / kFeatureCacheFile).string() << '\n';
}

void cmd_select(const ExperimentConfig& cfg, std::ostream& log) {
  const FeatureCache cache = load_compatible_cache(cfg);
  const DatasetManifest m = with_validation_split(cfg);
  const References refs = reference_ids(cfg, m);

  std::vector<std::int64_t> source_ids;
  for (const auto& r : m.records) {
    if (r.role == Role::source) source_ids.push_back(r.id);
  }
  if (source_ids.empty()) throw IngestError("manifest has no source records to select from");
  const auto sampled = subsample_source(source_ids, cfg.selection.subsample_k, derive_seed(cfg.seed, "source-subsample"));
  std::map<std::int64_t, FeatureVector> candidates;
  for (auto id : sampled) candidates.emplace(id, cache.at(id));

  const SelectionResult result = select_supplement(candidates, features_of(cache, refs.starved_ids),
                                                   features_of(cache, refs.large_ids), cfg.selection);
  write_selection_csv(cfg.output_dir / kSelectionFile, result);
  log << "select: |D_s sample| = " << candidates.size() << ", N = " << result.shortlist_ids.size()
      << ", M = " << result.selected_ids.size() << " (starved refs " << refs.starved_ids.size()
      << ", large refs " << refs.large_ids.size() << ")\n";
}

void cmd_train(const ExperimentConfig& cfg, std::ostream& log) {
  const DatasetManifest m = with_validation_split(cfg);
  const TrainConfig t = train_config_for(cfg);

  if (cfg.model_kind == ModelKind::nearest_neighbor) {
    const FeatureCache cache = load_compatible_cache(cfg);
    const References refs = reference_ids(cfg, m);
    write_nn_refs(cfg.output_dir / kNearestRefsFile, refs, cache);
    log << "train: nearest_neighbor references " << refs.starved_ids.size() << " starved, "
        << refs.large_ids.size() << " large -> " << (cfg.output_dir / kNearestRefsFile).string() << '\n';
    return;
  }

  const ExampleSet train = load_examples(m, select_records(m, Role::target, Split::train));
  const ExampleSet val = load_examples(m, select_records(m, Role::target, Split::val));
  TrainOptions options;
  options.checkpoint_dir = cfg.output_dir;
  options.observer.on_epoch = [&](const EpochRecord& rec) {
    log << "epoch " << rec.epoch << ": target_loss " << format_double(rec.target_loss);
    if (rec.source_loss) log << ", source_loss " << format_double(*rec.source_loss);
    log << ", val_pr_auc " << format_double(rec.val_pr_auc) << '\n';
  };

  TrainResult result;
  if (cfg.model_kind == ModelKind::stm) {
    const SelectionResult selection = read_selection_csv(cfg.output_dir / kSelectionFile);
    std::map<std::int64_t, const SampleRecord*> by_id;
    for (const auto& r : m.records) {
      if (r.role == Role::source) by_id[r.id] = &r;
    }
    std::vector<SampleRecord> chosen;
    for (auto id : selection.selected_ids) {
      const auto it = by_id.find(id);
      if (it == by_id.end()) {
        throw CompatibilityError("selection.csv lists id " + std::to_string(id) + ", which is not a source record");
      }
      chosen.push_back(*it->second);
    }
    const Supplement u = load_supplement(m, chosen);
    const NetworkSpec spec = with_source_classes(cfg.network, static_cast<int>(u.categories.size()));
    log << "train: stm with |U| = " << u.examples.size() << " over " << u.categories.size() << " categories\n";
    result = train_stm(train, val, u.examples, spec, t, options);
  } else if (cfg.model_kind == ModelKind::finetune_imbalanced || cfg.model_kind == ModelKind::finetune_subsampled) {
    std::vector<SampleRecord> source;
    for (const auto& r : m.records) {
      if (r.role == Role::source) source.push_back(r);
    }
    const Supplement ds = load_supplement(m, source);
    const NetworkSpec spec = with_source_classes(cfg.network, static_cast<int>(ds.categories.size()));
    log << "train: pretraining on " << ds.examples.size() << " source images, " << ds.categories.size()
        << " categories, " << t.pretrain_epochs << " epochs\n";
    const PretrainResult pre = pretrain_on_source(spec, ds.examples, t.pretrain_epochs, t);
    write_pretrain_csv(cfg.output_dir / "pretrain_history.csv", pre.epoch_losses);
    result = train_baseline(cfg.model_kind, train, val, spec, t, &pre.params, options);
  } else {
    log << "train: " << to_string(cfg.model_kind) << '\n';
    result = train_baseline(cfg.model_kind, train, val, cfg.network, t, nullptr, options);
  }
  write_history_csv(cfg.output_dir / kHistoryFile, result.history);
  log << "train: best epoch " << result.best_epoch + 1 << " of " << result.history.size() << " -> "
      << (cfg.output_dir / kBestCheckpointFile).string() << '\n';
}

void cmd_eval(const ExperimentConfig& cfg, std::ostream& log) {
  const auto test_records = select_records(cfg.manifest, Role::target, Split::test);
  const ClassCounts counts = count_target(cfg.manifest, Split::test);
  if (counts.starved == 0) throw IngestError("test split has no starved (positive) records");

  std::vector<ScoredId> scores;
  if (cfg.model_kind == ModelKind::nearest_neighbor) {
    const FeatureCacheMeta meta = wanted_meta(cfg);
    const NearestRefs refs = read_nn_refs(cfg.output_dir / kNearestRefsFile, meta);
    const FeatureCache cache = load_compatible_cache(cfg);
    for (const auto& r : test_records) scores.push_back({r.id, nn_score(refs.starved, refs.large, cache.at(r.id))});
  } else {
    const fs::path ckpt = cfg.output_dir / kBestCheckpointFile;
    if (!fs::exists(ckpt)) throw MissingArtifactError("missing model artifact " + ckpt.string() + "; run `train` first");
    const Checkpoint model = load_checkpoint(ckpt);
    if (model.spec.input_height != cfg.manifest.patch_size.height ||
        model.spec.input_width != cfg.manifest.patch_size.width) {
      throw CompatibilityError("checkpoint input size does not match the manifest patch size");
    }
    scores = evaluate(model, load_examples(cfg.manifest, test_records));
  }
  write_scores(cfg.output_dir / kScoresFile, scores);

  std::vector<ScoredSample> samples;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    samples.push_back({scores[i].id, scores[i].score, test_records[i].is_starved()});
  }
  const PRCurve pr = pr_curve(samples);
  const auto area = cfg.manifest.survey_area_km2.find(Split::test);
  const FARCurve far = area != cfg.manifest.survey_area_km2.end()
                           ? far_curve(samples, area->second, cfg.far_cutoff)
                           : far_curve_per_1000(samples, cfg.far_cutoff);
  emit_curves(pr, far, cfg.output_dir, std::string(to_string(cfg.model_kind)));

  json report;
  report["model_kind"] = std::string(to_string(cfg.model_kind));
  report["seed"] = cfg.seed;
  report["test_positives"] = counts.starved;
  report["test_negatives"] = counts.large;
  report["imbalance_ratio"] = imbalance_ratio(counts.starved, counts.large);
  report["average_precision"] = pr.average_precision;
  report["average_precision_definition"] = "mean precision at the rank of each positive; ties ranked negatives first";
  report["far_auc"] = far.auc;
  report["far_cutoff"] = far.cutoff;
  report["far_unit"] = far.unit;
  report["far_total_area"] = far.total_area;
  report["far_auc_definition"] =
      "(1/cutoff) * integral over [0, cutoff] of the right-continuous step p_d(x), starting at (0, 0)";
  const fs::path report_path = cfg.output_dir / kReportFile;
  std::ofstream out(report_path, std::ios::binary);
  if (!out) throw IngestError("cannot write " + report_path.string());
  out << report.dump(2) << '\n';
  log << "eval: " << scores.size() << " test records, AP " << format_double(pr.average_precision) << ", FAR AUC "
      << format_double(far.auc) << " (" << far.unit << ", cutoff " << format_double(far.cutoff) << ")\n";
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Supplemental-data rebalancing for starved-class image classification"};
  app.require_subcommand(1);
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"features", "extract Gabor histogram features for every manifest record"},
      {"select", "pick the supplemental source set U"},
      {"train", "train the configured model kind"},
      {"eval", "score the test split and write metric artifacts"}};
  std::vector<CLI::App*> subs;
  std::vector<CLI::Option*> seed_opts;
  std::vector<CLI::Option*> out_opts;
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "experiment config (JSON)")->required();
    out_opts.push_back(sub->add_option("--out", out_dir, "output directory (overrides the config)"));
    seed_opts.push_back(sub->add_option("--seed", seed, "seed (overrides the config)"));
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ErrorKind::usage);
  }

  try {
    std::size_t which = 0;
    while (!subs[which]->parsed()) ++which;
    std::optional<fs::path> out_override;
    std::optional<std::uint64_t> seed_override;
    if (out_opts[which]->count() > 0) out_override = fs::path(out_dir);
    if (seed_opts[which]->count() > 0) seed_override = seed;
    const ExperimentConfig cfg = load_config(config_path, out_override, seed_override);

    OutputLock lock(cfg.output_dir);
    switch (which) {
      case 0: cmd_features(cfg, out); break;
      case 1: cmd_select(cfg, out); break;
      case 2: cmd_train(cfg, out); break;
      default: cmd_eval(cfg, out); break;
    }
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ErrorKind::ingestion);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ErrorKind::usage);
  }
}

}  // namespace rebalance::cli
