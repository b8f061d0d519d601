#include <doctest.h>

#include <cmath>
#include <fstream>

#include "rebalance/checkpoint.hpp"
#include "rebalance/error.hpp"
#include "rebalance/network.hpp"
#include "rebalance/rng.hpp"
#include "support.hpp"

using namespace rebalance;

namespace {

NetworkSpec make_spec(int c, int h, int w, std::vector<LayerSpec> trunk, std::vector<LayerSpec> target,
                      std::vector<LayerSpec> source = {}) {
  NetworkSpec s;
  s.input_channels = c;
  s.input_height = h;
  s.input_width = w;
  s.trunk = std::move(trunk);
  s.target_head = std::move(target);
  s.source_head = std::move(source);
  return s;
}

Batch random_batch(const NetworkSpec& spec, std::size_t n, int classes, Rng& rng) {
  Batch b;
  b.inputs = Tensor({n, static_cast<std::size_t>(spec.input_channels), static_cast<std::size_t>(spec.input_height),
                     static_cast<std::size_t>(spec.input_width)});
  for (double& v : b.inputs.data) v = rng.normal(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) b.labels.push_back(static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(classes))));
  return b;
}

ParamSet zero_params(const NetworkSpec& spec) {
  ParamSet p = init_params(spec, 0);
  for (auto& s : p.slots) std::fill(s.value.data.begin(), s.value.data.end(), 0.0);
  return p;
}

// Small-magnitude random biases so relu kinks are not sitting at zero.
ParamSet jittered_params(const NetworkSpec& spec, std::uint64_t seed) {
  ParamSet p = init_params(spec, seed);
  Rng rng(seed + 1000);
  for (auto& s : p.slots) {
    if (s.name.ends_with(".bias")) {
      for (double& v : s.value.data) v = rng.normal(0.0, 0.1);
    }
  }
  return p;
}

const NetworkSpec& tiny_two_head() {
  static const NetworkSpec spec = make_spec(1, 8, 8, {LayerSpec::conv(3, 3), LayerSpec::relu(), LayerSpec::maxpool(2)},
                                            {LayerSpec::flatten(), LayerSpec::dense(4), LayerSpec::relu(), LayerSpec::dense(2)},
                                            {LayerSpec::flatten(), LayerSpec::dense(3)});
  return spec;
}

}  // namespace

TEST_CASE("default spec has the declared shape") {
  const NetworkSpec s = default_network_spec(64, 64, 5);
  REQUIRE(s.trunk.size() == 6);
  CHECK(s.trunk[0] == LayerSpec::conv(8, 5));
  CHECK(s.trunk[3] == LayerSpec::conv(16, 5));
  CHECK(s.trunk[5] == LayerSpec::maxpool(2));
  CHECK(s.target_head.back() == LayerSpec::dense(2));
  CHECK(s.source_head.back() == LayerSpec::dense(5));
  CHECK_NOTHROW(validate(s));
  CHECK(without_source_head(s).source_head.empty());
  CHECK(network_spec_from_json(to_json(s)) == s);
  CHECK_NOTHROW(validate(default_network_spec(168, 168, 0)));
}

TEST_CASE("spec validation catches broken chains") {
  CHECK_THROWS_AS(validate(make_spec(1, 4, 4, {LayerSpec::conv(2, 5)}, {LayerSpec::flatten(), LayerSpec::dense(2)})), UsageError);
  CHECK_THROWS_AS(validate(make_spec(1, 8, 8, {}, {LayerSpec::flatten(), LayerSpec::dense(3)})), UsageError);
  CHECK_THROWS_AS(validate(make_spec(1, 8, 8, {}, {})), UsageError);
}

TEST_CASE("init is seeded, zero-bias and he-scaled") {
  const NetworkSpec spec = make_spec(1, 10, 10, {LayerSpec::flatten()}, {LayerSpec::dense(50), LayerSpec::relu(), LayerSpec::dense(2)});
  const ParamSet a = init_params(spec, 17);
  CHECK(a == init_params(spec, 17));
  CHECK_FALSE(a == init_params(spec, 18));
  for (const auto& s : a.slots) {
    for (double m : s.momentum.data) CHECK(m == 0.0);
    if (s.name.ends_with(".bias")) {
      for (double v : s.value.data) CHECK(v == 0.0);
    }
  }
  const ParamSlot* w = a.find("target.0.weight");
  REQUIRE(w != nullptr);
  REQUIRE(w->value.size() == 5000);
  double sum = 0.0, sq = 0.0;
  for (double v : w->value.data) {
    sum += v;
    sq += v * v;
  }
  const double mean = sum / 5000.0;
  const double sd = std::sqrt(sq / 5000.0 - mean * mean);
  CHECK(std::abs(sd - std::sqrt(2.0 / 100.0)) < 0.1 * std::sqrt(2.0 / 100.0));
}

TEST_CASE("slot names follow the canonical order") {
  const ParamSet p = init_params(tiny_two_head(), 1);
  std::vector<std::string> names;
  for (const auto& s : p.slots) names.push_back(s.name);
  CHECK(names == std::vector<std::string>{"trunk.0.weight", "trunk.0.bias", "target.1.weight", "target.1.bias",
                                          "target.3.weight", "target.3.bias", "source.1.weight", "source.1.bias"});
  const ParamSet deployed = drop_head(p, Head::source);
  CHECK(deployed.slots.size() == 6);
  CHECK_NOTHROW(check_params_match(without_source_head(tiny_two_head()), deployed));
  CHECK_THROWS_AS(check_params_match(tiny_two_head(), deployed), CompatibilityError);
}

TEST_CASE("zero parameters give zero logits of the right shape") {
  Rng rng(2);
  const NetworkSpec spec = default_network_spec(32, 32, 4);
  const Batch b = random_batch(spec, 3, 2, rng);
  const ParamSet p = zero_params(spec);
  const auto t = forward(spec, p, b.inputs, Head::target);
  CHECK(t.logits.shape == std::vector<std::size_t>{3, 2});
  for (double v : t.logits.data) CHECK(v == 0.0);
  const auto s = forward(spec, p, b.inputs, Head::source);
  CHECK(s.logits.shape == std::vector<std::size_t>{3, 4});
  CHECK(batch_loss(spec, p, b, Head::target) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("forward agrees with a hand evaluation of conv then dense") {
  // conv{2, 3x3, stride 2} on a 1x7x7 input -> 2x3x3, flatten, dense{2}.
  const NetworkSpec spec = make_spec(1, 7, 7, {LayerSpec::conv(2, 3, 2)}, {LayerSpec::flatten(), LayerSpec::dense(2)});
  const ParamSet p = jittered_params(spec, 5);
  Rng rng(6);
  const Batch b = random_batch(spec, 1, 2, rng);
  const auto& cw = p.find("trunk.0.weight")->value;
  const auto& cb = p.find("trunk.0.bias")->value;
  const auto& dw = p.find("target.1.weight")->value;
  const auto& db = p.find("target.1.bias")->value;
  std::vector<double> feat;  // channel-major, then row, then column
  for (int o = 0; o < 2; ++o) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) {
        double acc = cb.data[o];
        for (int ky = 0; ky < 3; ++ky) {
          for (int kx = 0; kx < 3; ++kx) acc += cw.data[o * 9 + ky * 3 + kx] * b.inputs.data[(2 * r + ky) * 7 + 2 * c + kx];
        }
        feat.push_back(acc);
      }
    }
  }
  const auto out = forward(spec, p, b.inputs, Head::target);
  for (int u = 0; u < 2; ++u) {
    double acc = db.data[u];
    for (int i = 0; i < 18; ++i) acc += dw.data[u * 18 + i] * feat[i];
    CHECK(std::abs(out.logits.data[u] - acc) <= 1e-12);
  }
}

TEST_CASE("weighted cross-entropy") {
  Rng rng(8);
  const NetworkSpec spec = tiny_two_head();
  const ParamSet p = jittered_params(spec, 3);
  Batch b = random_batch(spec, 6, 2, rng);
  b.labels = {0, 1, 0, 1, 1, 0};

  // Hand computation from the logits.
  const Tensor probs = softmax(forward(spec, p, b.inputs, Head::target).logits);
  b.class_weights = {0.3, 2.0};
  double expected = 0.0;
  for (std::size_t i = 0; i < 6; ++i) expected += b.class_weights[b.labels[i]] * -std::log(probs.data[i * 2 + b.labels[i]]);
  expected /= 6.0;
  CHECK(batch_loss(spec, p, b, Head::target) == doctest::Approx(expected).epsilon(1e-13));

  // Zero weight on class 1 equals dropping those samples' contribution.
  b.class_weights = {1.0, 0.0};
  const auto lg = loss_and_grads(spec, p, b, Head::target);
  double sum0 = 0.0;
  for (std::size_t i : {0u, 2u, 5u}) sum0 += -std::log(probs.data[i * 2]);
  CHECK(lg.loss == doctest::Approx(sum0 / 6.0).epsilon(1e-13));

  // Equal weights of one match the unweighted loss.
  Batch unit = b;
  unit.class_weights = {1.0, 1.0};
  Batch none = b;
  none.class_weights.clear();
  CHECK(std::abs(batch_loss(spec, p, unit, Head::target) - batch_loss(spec, p, none, Head::target)) <= 1e-12);

  Batch bad = b;
  bad.labels[0] = 2;
  CHECK_THROWS_AS(loss_and_grads(spec, p, bad, Head::target), UsageError);
}

TEST_CASE("a zero class weight removes that class from the gradient") {
  Rng rng(9);
  const NetworkSpec spec = tiny_two_head();
  const ParamSet p = jittered_params(spec, 4);
  Batch b = random_batch(spec, 4, 2, rng);
  b.labels = {0, 1, 1, 0};
  b.class_weights = {0.0, 1.0};
  Batch ones = b;
  ones.inputs = Tensor({2, 1, 8, 8});
  std::copy(b.inputs.data.begin() + 64, b.inputs.data.begin() + 192, ones.inputs.data.begin());
  ones.labels = {1, 1};
  ones.class_weights = {0.0, 1.0};
  const auto full = loss_and_grads(spec, p, b, Head::target);
  const auto part = loss_and_grads(spec, p, ones, Head::target);
  REQUIRE(full.grads.size() == part.grads.size());
  for (std::size_t s = 0; s < full.grads.size(); ++s) {
    for (std::size_t i = 0; i < full.grads[s].value.size(); ++i) {
      // Same samples, but the mean runs over 4 instead of 2.
      CHECK(full.grads[s].value.data[i] == doctest::Approx(part.grads[s].value.data[i] / 2.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("gradients only cover the trunk and the selected head") {
  Rng rng(10);
  const NetworkSpec spec = tiny_two_head();
  const ParamSet p = jittered_params(spec, 5);
  const Batch b = random_batch(spec, 3, 2, rng);
  for (const auto& g : loss_and_grads(spec, p, b, Head::target).grads) CHECK_FALSE(g.name.starts_with("source."));
  Batch sb = random_batch(spec, 3, 3, rng);
  for (const auto& g : loss_and_grads(spec, p, sb, Head::source).grads) CHECK_FALSE(g.name.starts_with("target."));
}

TEST_CASE("gradient check passes per layer kind") {
  struct Case {
    const char* name;
    NetworkSpec spec;
  };
  const std::vector<Case> cases{
      {"conv", make_spec(2, 7, 7, {LayerSpec::conv(3, 3)}, {LayerSpec::flatten(), LayerSpec::dense(2)})},
      {"strided conv", make_spec(1, 9, 9, {LayerSpec::conv(2, 3, 2)}, {LayerSpec::flatten(), LayerSpec::dense(2)})},
      {"relu", make_spec(1, 6, 6, {LayerSpec::conv(3, 3), LayerSpec::relu()}, {LayerSpec::flatten(), LayerSpec::dense(2)})},
      {"maxpool", make_spec(1, 8, 8, {LayerSpec::conv(2, 3), LayerSpec::maxpool(2)}, {LayerSpec::flatten(), LayerSpec::dense(2)})},
      {"dense", make_spec(1, 5, 5, {LayerSpec::flatten()}, {LayerSpec::dense(6), LayerSpec::relu(), LayerSpec::dense(2)})},
  };
  Rng rng(12);
  for (const auto& c : cases) {
    CAPTURE(c.name);
    const ParamSet p = jittered_params(c.spec, 7);
    const Batch b = random_batch(c.spec, 4, 2, rng);
    CHECK(gradient_check(c.spec, p, b, Head::target) < 1e-5);
  }
  const ParamSet p = jittered_params(tiny_two_head(), 8);
  CHECK(gradient_check(tiny_two_head(), p, random_batch(tiny_two_head(), 4, 3, rng), Head::source) < 1e-5);
}

TEST_CASE("gradient check detects a corrupted gradient") {
  Rng rng(13);
  const NetworkSpec spec = tiny_two_head();
  const ParamSet p = jittered_params(spec, 9);
  const Batch b = random_batch(spec, 4, 2, rng);
  auto lg = loss_and_grads(spec, p, b, Head::target);
  for (auto& g : lg.grads) {
    if (g.name == "target.3.weight") {
      for (double& v : g.value.data) v *= 2.0;
    }
  }
  CHECK(compare_gradients(spec, p, b, Head::target, lg.grads) > 0.3);
  GradientCheckOptions zero;
  zero.eps = 0.0;
  CHECK_THROWS_AS(gradient_check(spec, p, b, Head::target, zero), UsageError);
}

TEST_CASE("sgd with momentum follows the recurrence") {
  ParamSet p;
  p.slots.push_back({"w", Tensor({1}, 1.0), Tensor({1}, 0.0)});
  const Gradients g{{"w", Tensor({1}, 1.0)}};
  sgd_step(p, g, 0.1, 0.9);
  sgd_step(p, g, 0.1, 0.9);
  CHECK(p.slots[0].value.data[0] == doctest::Approx(0.71).epsilon(1e-15));
  CHECK(p.slots[0].momentum.data[0] == doctest::Approx(-0.19).epsilon(1e-15));

  ParamSet q;
  q.slots.push_back({"w", Tensor({2}, 0.5), Tensor({2}, 0.0)});
  q.slots[0].momentum.data = {0.2, -0.4};
  sgd_step(q, {{"w", Tensor({2}, 3.0)}}, 0.0, 0.5);
  CHECK(q.slots[0].momentum.data == AlignedVector{0.1, -0.2});

  ParamSet r;
  r.slots.push_back({"w", Tensor({1}, 2.0), Tensor({1}, 0.0)});
  sgd_step(r, {{"w", Tensor({1}, 0.5)}}, 0.2, 0.0);
  CHECK(r.slots[0].value.data[0] == 2.0 - 0.2 * 0.5);

  CHECK_THROWS_AS(sgd_step(r, {{"w", Tensor({2}, 1.0)}}, 0.1, 0.0), UsageError);
  CHECK_THROWS_AS(sgd_step(r, {{"w", Tensor({1}, 1.0)}}, 0.1, 1.0), UsageError);
}

TEST_CASE("one small step decreases a quadratic") {
  ParamSet p;
  p.slots.push_back({"w", Tensor({1}, 3.0), Tensor({1}, 0.0)});
  const double before = p.slots[0].value.data[0] * p.slots[0].value.data[0];
  sgd_step(p, {{"w", Tensor({1}, 2.0 * p.slots[0].value.data[0])}}, 0.01, 0.9);
  CHECK(p.slots[0].value.data[0] * p.slots[0].value.data[0] < before);
}

TEST_CASE("confident correct logits drive the loss to zero") {
  const NetworkSpec spec = make_spec(1, 1, 1, {LayerSpec::flatten()}, {LayerSpec::dense(2)});
  ParamSet p = zero_params(spec);
  p.find("target.0.bias")->value.data = {0.0, 60.0};
  Batch b;
  b.inputs = Tensor({1, 1, 1, 1}, 0.0);
  b.labels = {1};
  const double loss = batch_loss(spec, p, b, Head::target);
  CHECK(loss >= 0.0);
  CHECK(loss < 1e-20);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  testing::TempDir dir;
  const NetworkSpec spec = tiny_two_head();
  ParamSet p = jittered_params(spec, 21);
  p.slots[0].momentum.data[0] = -0.125;
  save_checkpoint(spec, p, dir / "a.ckpt");
  const Checkpoint c = load_checkpoint(dir / "a.ckpt");
  CHECK(c.spec == spec);
  CHECK(c.params == p);
  CHECK_NOTHROW(load_checkpoint(dir / "a.ckpt", spec));
  CHECK_THROWS_AS(load_checkpoint(dir / "a.ckpt", without_source_head(spec)), CompatibilityError);

  const std::string bytes = testing::read_file(dir / "a.ckpt");
  CHECK(bytes.substr(0, 4) == "RBLC");
  CHECK(static_cast<unsigned char>(bytes[4]) == kCheckpointVersion);

  std::string bad = bytes;
  bad[0] = 'X';
  testing::write_file(dir / "magic.ckpt", bad);
  CHECK_THROWS_AS(load_checkpoint(dir / "magic.ckpt"), CompatibilityError);
  bad = bytes;
  bad[4] = 9;
  testing::write_file(dir / "version.ckpt", bad);
  CHECK_THROWS_AS(load_checkpoint(dir / "version.ckpt"), CompatibilityError);
  testing::write_file(dir / "short.ckpt", bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(load_checkpoint(dir / "short.ckpt"), CompatibilityError);
  testing::write_file(dir / "long.ckpt", bytes + "x");
  CHECK_THROWS_AS(load_checkpoint(dir / "long.ckpt"), CompatibilityError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), MissingArtifactError);
}

TEST_CASE("gradient check passes on the default network, both heads") {
  Rng rng(14);
  const NetworkSpec spec = default_network_spec(64, 64, 3);
  const ParamSet p = jittered_params(spec, 10);
  for (int classes : {2, 3}) {
    Batch b = random_batch(spec, 4, classes, rng);
    for (double& v : b.inputs.data) v = rng.uniform();  // patch intensities
    CHECK(gradient_check(spec, p, b, classes == 2 ? Head::target : Head::source) < 1e-5);
  }
}

TEST_CASE("frozen kinks keep the probe step on one linear piece") {
  // A 1x1 conv over three channels feeds a single 2x2 pool window whose top two
  // entries differ by 1e-7, well inside the probe step on the first two weights.
  const NetworkSpec spec = make_spec(3, 2, 2, {LayerSpec::conv(1, 1), LayerSpec::maxpool(2)}, {LayerSpec::flatten(), LayerSpec::dense(2)});
  ParamSet p = init_params(spec, 3);
  p.find("trunk.0.weight")->value.data = {1.0, 1.0 + 1e-7, 0.4};
  p.find("trunk.0.bias")->value.data = {0.1};
  p.find("target.1.weight")->value.data = {0.8, -0.6};
  p.find("target.1.bias")->value.data = {0.05, -0.02};
  Batch b;
  b.inputs = Tensor({1, 3, 2, 2}, 0.0);
  b.inputs.data = {1.0, 0.0, 0.2, 0.1, 0.0, 1.0, 0.3, 0.0, 0.5, 0.5, 0.1, 0.2};
  b.labels = {1};
  GradientCheckOptions naive;
  naive.freeze_kinks = false;
  CHECK(gradient_check(spec, p, b, Head::target, naive) > 0.3);
  CHECK(gradient_check(spec, p, b, Head::target) < 1e-5);
}
