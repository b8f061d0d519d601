#include <doctest.h>

#include <cmath>

#include "rebalance/error.hpp"
#include "rebalance/training.hpp"
#include "support.hpp"

using namespace rebalance;

namespace {

constexpr int kPatch = 12;

NetworkSpec toy_spec(int source_classes) {
  NetworkSpec s;
  s.input_height = kPatch;
  s.input_width = kPatch;
  s.trunk = {LayerSpec::conv(4, 3), LayerSpec::relu(), LayerSpec::maxpool(2)};
  s.target_head = {LayerSpec::flatten(), LayerSpec::dense(8), LayerSpec::relu(), LayerSpec::dense(2)};
  if (source_classes > 0) s.source_head = {LayerSpec::flatten(), LayerSpec::dense(8), LayerSpec::relu(), LayerSpec::dense(source_classes)};
  return s;
}

// Starved patches carry a bright square on noise; large ones are noise only.
std::shared_ptr<const ImagePatch> toy_image(bool starved, Rng& rng) {
  auto img = std::make_shared<ImagePatch>(kPatch, kPatch);
  for (double& v : img->pixels) v = 0.3 * rng.uniform();
  if (starved) {
    const int r = 2 + static_cast<int>(rng.uniform_index(5));
    const int c = 2 + static_cast<int>(rng.uniform_index(5));
    for (int y = r; y < r + 4; ++y) {
      for (int x = c; x < c + 4; ++x) img->at(y, x) = 0.9;
    }
  }
  return img;
}

ExampleSet toy_target(std::size_t starved, std::size_t large, std::int64_t first_id, Rng& rng) {
  ExampleSet s;
  std::int64_t id = first_id;
  for (std::size_t i = 0; i < starved; ++i) s.add(id++, toy_image(true, rng), kStarvedClass);
  for (std::size_t i = 0; i < large; ++i) s.add(id++, toy_image(false, rng), kLargeClass);
  return s;
}

// Category 0: horizontal bars, 1: vertical bars.
ExampleSet toy_source(std::size_t per_category, std::int64_t first_id, Rng& rng) {
  ExampleSet s;
  std::int64_t id = first_id;
  for (int cat = 0; cat < 2; ++cat) {
    for (std::size_t i = 0; i < per_category; ++i) {
      auto img = std::make_shared<ImagePatch>(kPatch, kPatch);
      const int phase = static_cast<int>(rng.uniform_index(3));
      for (int y = 0; y < kPatch; ++y) {
        for (int x = 0; x < kPatch; ++x) img->at(y, x) = ((cat == 0 ? y : x) + phase) % 3 == 0 ? 0.8 : 0.1 * rng.uniform();
      }
      s.add(id++, img, cat);
    }
  }
  return s;
}

TrainConfig toy_config(int epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.target_batch = 16;
  cfg.source_batch = 8;
  cfg.lr = 0.02;
  cfg.upsample_factor = 3;
  cfg.seed = 5;
  return cfg;
}

struct ToyData {
  ExampleSet train, val, source;
};

const ToyData& toy_data() {
  static const ToyData data = [] {
    Rng rng(42);
    return ToyData{toy_target(8, 60, 1, rng), toy_target(4, 20, 1000, rng), toy_source(20, 2000, rng)};
  }();
  return data;
}

bool slots_equal(const ParamSet& a, const ParamSet& b, const std::string& prefix) {
  for (const auto& s : a.slots) {
    if (!s.name.starts_with(prefix)) continue;
    if (s.value != b.find(s.name)->value) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("inverse frequency weights") {
  Rng rng(1);
  const ExampleSet t = toy_target(10, 1000, 1, rng);
  const auto w = inverse_frequency_weights(t);
  REQUIRE(w.size() == 2);
  CHECK(w[kStarvedClass] == doctest::Approx(50.5).epsilon(1e-15));
  CHECK(w[kLargeClass] == doctest::Approx(0.505).epsilon(1e-15));
  // Mean weight over samples is one.
  CHECK((10 * w[kStarvedClass] + 1000 * w[kLargeClass]) / 1010.0 == doctest::Approx(1.0));
}

TEST_CASE("class weights with equal counts leave the loss unchanged") {
  Rng rng(2);
  const ExampleSet t = toy_target(6, 6, 1, rng);
  const auto w = inverse_frequency_weights(t);
  CHECK(w == std::vector<double>{1.0, 1.0});
  const NetworkSpec spec = toy_spec(0);
  const ParamSet p = init_params(spec, 3);
  Batch b;
  b.inputs = Tensor({12, 1, kPatch, kPatch});
  for (std::size_t i = 0; i < 12; ++i) std::copy(t.images[i]->pixels.begin(), t.images[i]->pixels.end(), b.inputs.data.begin() + static_cast<long>(i * kPatch * kPatch));
  b.labels = t.labels;
  const double plain = batch_loss(spec, p, b, Head::target);
  b.class_weights = w;
  CHECK(std::abs(batch_loss(spec, p, b, Head::target) - plain) <= 1e-12);
}

TEST_CASE("upsample and subsample example sets") {
  Rng rng(3);
  const ExampleSet t = toy_target(5, 40, 1, rng);
  const ExampleSet up = upsample_examples(t, 4);
  std::size_t starved = 0;
  for (int l : up.labels) starved += l == kStarvedClass ? 1 : 0;
  CHECK(starved == 20);
  CHECK(up.size() == 60);
  const ExampleSet sub = subsample_examples(up, 1.0, 9);
  std::size_t s2 = 0, l2 = 0;
  for (int l : sub.labels) (l == kStarvedClass ? s2 : l2) += 1;
  CHECK(s2 == 20);
  CHECK(l2 == 20);
}

TEST_CASE("nn_score") {
  auto fv = [](double v) { return FeatureVector{{v}, 1, 1}; };
  CHECK(nn_score({fv(0.0)}, {fv(1.0)}, fv(0.25)) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(nn_score({fv(0.0), fv(3.0)}, {fv(1.0)}, fv(3.0)) == 1.0);
  CHECK(nn_score({fv(0.0)}, {fv(1.0)}, fv(0.5)) == 0.5);
  CHECK(nn_score({fv(0.5)}, {fv(0.5)}, fv(0.5)) == 0.5);
  CHECK_THROWS_AS(nn_score({}, {fv(1.0)}, fv(0.5)), UsageError);
}

TEST_CASE("best epoch selection") {
  auto hist = [](std::vector<double> aps) {
    EpochHistory h;
    for (std::size_t i = 0; i < aps.size(); ++i) h.push_back({static_cast<int>(i + 1), 0.0, std::nullopt, aps[i], {}});
    return h;
  };
  CHECK(select_best_epoch(hist({0.5, 0.9, 0.7})) == 1);
  CHECK(select_best_epoch(hist({0.4, 0.4, 0.4})) == 0);
  CHECK(select_best_epoch(hist({0.3})) == 0);
  CHECK_THROWS_AS(select_best_epoch({}), UsageError);
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(validate(cfg));
  CHECK(cfg.pretrain_epochs == 30);
  CHECK(cfg.upsample_factor == 10);
  cfg.source_batch = cfg.target_batch + 1;
  CHECK_THROWS_AS(validate(cfg), UsageError);
  cfg = TrainConfig{};
  cfg.momentum = 1.0;
  CHECK_THROWS_AS(validate(cfg), UsageError);
  CHECK(parse_model_kind("finetune_subsampled") == ModelKind::finetune_subsampled);
  CHECK_THROWS_AS(parse_model_kind("svm"), UsageError);
}

TEST_CASE("supplement labels follow sorted categories") {
  Rng rng(4);
  const auto a = toy_image(true, rng);
  const Supplement s = make_supplement({7, 8, 9}, {a, a, a}, {"ring", "disc", "ring"});
  CHECK(s.categories == std::vector<std::string>{"disc", "ring"});
  CHECK(s.examples.labels == std::vector<int>{1, 0, 1});
  CHECK_THROWS_AS(make_supplement({7}, {a, a}, {"disc"}), UsageError);
  CHECK_THROWS_AS(make_supplement({7}, {a}, {""}), UsageError);
}

TEST_CASE("stm history, determinism and interleaving") {
  const auto& d = toy_data();
  const NetworkSpec spec = toy_spec(2);
  std::vector<Head> sequence;
  TrainOptions opts;
  opts.observer.on_batch = [&](Head h, const std::vector<std::size_t>&) { sequence.push_back(h); };
  const auto a = train_stm(d.train, d.val, d.source, spec, toy_config(2), opts);
  REQUIRE(a.history.size() == 2);
  for (const auto& rec : a.history) {
    CHECK(rec.source_loss.has_value());
    CHECK(rec.val_pr_auc >= 0.0);
    CHECK(rec.val_pr_auc <= 1.0);
  }
  // 8 starved x 3 + 60 large = 84 examples -> 6 target batches per epoch.
  REQUIRE(sequence.size() == 24);
  for (std::size_t i = 0; i < sequence.size(); ++i) CHECK(sequence[i] == (i % 2 == 0 ? Head::target : Head::source));

  const auto b = train_stm(d.train, d.val, d.source, spec, toy_config(2));
  for (std::size_t i = 0; i < a.best.params.slots.size(); ++i) {
    CAPTURE(a.best.params.slots[i].name);
    CHECK(a.best.params.slots[i].value == b.best.params.slots[i].value);
    CHECK(a.best.params.slots[i].momentum == b.best.params.slots[i].momentum);
  }
  CHECK(a.best.params == b.best.params);
  CHECK(a.best.spec == b.best.spec);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(a.history[i].target_loss == b.history[i].target_loss);
    CHECK(a.history[i].source_loss == b.history[i].source_loss);
    CHECK(a.history[i].val_pr_auc == b.history[i].val_pr_auc);
  }
  CHECK(a.best.spec.source_head.empty());
  for (const auto& s : a.best.params.slots) CHECK_FALSE(s.name.starts_with("source."));
}

TEST_CASE("stm steps touch only the trunk and their own head") {
  const auto& d = toy_data();
  TrainOptions opts;
  std::size_t audited = 0;
  opts.observer.on_step = [&](Head h, const ParamSet& before, const ParamSet& after) {
    const std::string other = h == Head::target ? "source." : "target.";
    const std::string own = h == Head::target ? "target." : "source.";
    CHECK(slots_equal(before, after, other));
    CHECK_FALSE(slots_equal(before, after, own));
    CHECK_FALSE(slots_equal(before, after, "trunk."));
    ++audited;
  };
  train_stm(d.train, d.val, d.source, toy_spec(2), toy_config(1), opts);
  CHECK(audited == 12);
}

TEST_CASE("stm on the toy task reduces the target loss every epoch early on") {
  const auto& d = toy_data();
  const auto r = train_stm(d.train, d.val, d.source, toy_spec(2), toy_config(5));
  for (std::size_t i = 1; i < 5; ++i) CHECK(r.history[i].target_loss < r.history[i - 1].target_loss);
}

TEST_CASE("stm rejects degenerate inputs") {
  const auto& d = toy_data();
  CHECK_THROWS_AS(train_stm(d.train, d.val, ExampleSet{}, toy_spec(2), toy_config(1)), UsageError);
  CHECK_THROWS_AS(train_stm(d.train, d.val, d.source, toy_spec(0), toy_config(1)), UsageError);
  Rng rng(6);
  const ExampleSet only_large = toy_target(0, 10, 1, rng);
  CHECK_THROWS_AS(train_stm(only_large, d.val, d.source, toy_spec(2), toy_config(1)), UsageError);
}

TEST_CASE("stm writes per-epoch and best checkpoints") {
  testing::TempDir dir;
  const auto& d = toy_data();
  TrainOptions opts;
  opts.checkpoint_dir = dir.path();
  const auto r = train_stm(d.train, d.val, d.source, toy_spec(2), toy_config(2), opts);
  CHECK(std::filesystem::exists(dir / "epoch_1.ckpt"));
  CHECK(std::filesystem::exists(dir / "epoch_2.ckpt"));
  CHECK(r.history[1].checkpoint == dir / "epoch_2.ckpt");
  const Checkpoint best = load_checkpoint(dir / "best.ckpt");
  CHECK(best.params == r.best.params);
  write_history_csv(dir / "history.csv", r.history);
  const std::string csv = testing::read_file(dir / "history.csv");
  CHECK(csv.rfind("epoch,target_loss,source_loss,val_pr_auc\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}

TEST_CASE("pretraining lowers the source loss and reseeds the target head") {
  const auto& d = toy_data();
  const NetworkSpec spec = toy_spec(2);
  TrainConfig cfg = toy_config(1);
  const auto pre = pretrain_on_source(spec, d.source, 1, cfg);
  REQUIRE(pre.epoch_losses.size() == 1);

  std::vector<std::size_t> all(d.source.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  Batch b;
  b.inputs = Tensor({all.size(), 1, kPatch, kPatch});
  for (std::size_t i : all) std::copy(d.source.images[i]->pixels.begin(), d.source.images[i]->pixels.end(), b.inputs.data.begin() + static_cast<long>(i * kPatch * kPatch));
  b.labels = d.source.labels;
  const ParamSet init = init_params(spec, derive_seed(cfg.seed, "pretrain-init"));
  CHECK(batch_loss(spec, pre.params, b, Head::source) < batch_loss(spec, init, b, Head::source));

  ExampleSet one = d.source;
  std::fill(one.labels.begin(), one.labels.end(), 0);
  CHECK_THROWS_AS(pretrain_on_source(spec, one, 1, cfg), UsageError);
  ExampleSet unlabeled = d.source;
  unlabeled.labels[0] = -1;
  CHECK_THROWS_AS(pretrain_on_source(spec, unlabeled, 1, cfg), UsageError);
}

TEST_CASE("fine-tuning starts from the pretrained parameters") {
  const auto& d = toy_data();
  const NetworkSpec spec = toy_spec(2);
  const TrainConfig cfg = toy_config(1);
  const auto pre = pretrain_on_source(spec, d.source, 1, cfg);
  for (ModelKind kind : {ModelKind::finetune_imbalanced, ModelKind::finetune_subsampled}) {
    bool first = true;
    TrainOptions opts;
    opts.observer.on_step = [&](Head, const ParamSet& before, const ParamSet&) {
      if (!first) return;
      first = false;
      const ParamSet expected = drop_head(pre.params, Head::source);
      REQUIRE(before.slots.size() == expected.slots.size());
      for (std::size_t i = 0; i < before.slots.size(); ++i) CHECK(before.slots[i].value == expected.slots[i].value);
    };
    train_baseline(kind, d.train, d.val, spec, cfg, &pre.params, opts);
    CHECK_FALSE(first);
  }
  CHECK_THROWS_AS(train_baseline(ModelKind::finetune_subsampled, d.train, d.val, spec, cfg), UsageError);
  CHECK_THROWS_AS(train_baseline(ModelKind::stm, d.train, d.val, spec, cfg), UsageError);
}

TEST_CASE("baseline batches: subsampled kinds see balanced classes") {
  const auto& d = toy_data();
  std::size_t total = 0;
  TrainOptions opts;
  opts.observer.on_batch = [&](Head, const std::vector<std::size_t>& idx) { total += idx.size(); };
  train_baseline(ModelKind::plain_subsampled, d.train, d.val, toy_spec(0), toy_config(1), nullptr, opts);
  CHECK(total == 2 * 8 * 3);
  total = 0;
  train_baseline(ModelKind::class_weighted, d.train, d.val, toy_spec(0), toy_config(1), nullptr, opts);
  CHECK(total == 8 * 3 + 60);
}

TEST_CASE("evaluation scores") {
  const auto& d = toy_data();
  const NetworkSpec spec = toy_spec(0);
  ParamSet zero = init_params(spec, 1);
  for (auto& s : zero.slots) std::fill(s.value.data.begin(), s.value.data.end(), 0.0);
  for (const auto& s : evaluate({spec, zero}, d.val)) CHECK(s.score == 0.5);

  const auto r = train_baseline(ModelKind::class_weighted, d.train, d.val, spec, toy_config(1));
  const auto a = evaluate(r.best, d.val);
  const auto b = evaluate(r.best, d.val);
  REQUIRE(a.size() == d.val.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == d.val.ids[i]);
    CHECK(a[i].score == b[i].score);
    CHECK(a[i].score >= 0.0);
    CHECK(a[i].score <= 1.0);
  }
  NetworkSpec other = spec;
  other.input_height = other.input_width = 16;
  CHECK_THROWS_AS(evaluate({other, init_params(other, 1)}, d.val), CompatibilityError);
}
