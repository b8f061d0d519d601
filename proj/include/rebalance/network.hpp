#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "rebalance/tensor.hpp"

namespace rebalance {

enum class LayerKind { conv, relu, maxpool, flatten, dense };

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  int out_channels = 0;  // conv
  int kernel_size = 0;   // conv
  int stride = 1;        // conv
  int window = 0;        // maxpool (stride == window)
  int units = 0;         // dense

  static LayerSpec conv(int out_channels, int kernel_size, int stride = 1) {
    return {LayerKind::conv, out_channels, kernel_size, stride, 0, 0};
  }
  static LayerSpec relu() { return {LayerKind::relu}; }
  static LayerSpec maxpool(int window) { return {LayerKind::maxpool, 0, 0, 1, window, 0}; }
  static LayerSpec flatten() { return {LayerKind::flatten}; }
  static LayerSpec dense(int units) { return {LayerKind::dense, 0, 0, 1, 0, units}; }

  bool operator==(const LayerSpec&) const = default;
};

/// Shared trunk feeding a binary target head and an optional source head.
/// An empty source head means the network is in deployed form.
struct NetworkSpec {
  int input_channels = 1;
  int input_height = 64;
  int input_width = 64;
  std::vector<LayerSpec> trunk;
  std::vector<LayerSpec> target_head;
  std::vector<LayerSpec> source_head;

  bool operator==(const NetworkSpec&) const = default;
};

enum class Head { target, source };

/// conv{8,5} relu pool2 conv{16,5} relu pool2 | flatten dense64 relu dense{out}.
NetworkSpec default_network_spec(int height, int width, int source_classes);

/// A lighter variant for desk-scale experiments: the first conv has stride 2,
/// the second a 3x3 kernel, and heads use 32 hidden units.
NetworkSpec desk_network_spec(int height, int width, int source_classes);

/// Replaces the source head's final dense layer width (or builds a head by
/// copying the target head's hidden layers when the source head is empty).
NetworkSpec with_source_classes(NetworkSpec spec, int source_classes);
NetworkSpec without_source_head(NetworkSpec spec);

/// Throws UsageError if shapes do not chain or heads end wrongly.
void validate(const NetworkSpec& spec);

nlohmann::json to_json(const NetworkSpec& spec);
NetworkSpec network_spec_from_json(const nlohmann::json& j);

struct ParamSlot {
  std::string name;
  Tensor value;
  Tensor momentum;

  bool operator==(const ParamSlot&) const = default;
};

/// Slots in canonical order: trunk, target head, source head; layer order;
/// weight before bias. Slot names look like "trunk.0.weight".
struct ParamSet {
  std::vector<ParamSlot> slots;

  ParamSlot* find(const std::string& name);
  const ParamSlot* find(const std::string& name) const;

  bool operator==(const ParamSet&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};
/// Gradients for the slots a pass touched, in canonical order.
using Gradients = std::vector<NamedTensor>;

std::string slot_prefix(Head head);
bool slot_in_head(const std::string& slot_name, const std::string& prefix);

/// He-normal weights (std sqrt(2 / fan_in)), zero biases and momentum. Every
/// slot draws from its own stream derived from (seed, slot name).
ParamSet init_params(const NetworkSpec& spec, std::uint64_t seed);

/// Re-draws only the slots of `head` with a new seed; momentum is zeroed.
void reinit_head(const NetworkSpec& spec, ParamSet& params, Head head, std::uint64_t seed);

/// Removes the slots of `head`.
ParamSet drop_head(const ParamSet& params, Head head);

/// Throws CompatibilityError if the slot names or shapes do not match `spec`.
void check_params_match(const NetworkSpec& spec, const ParamSet& params);

struct Batch {
  /// n x C x H x W
  Tensor inputs;
  std::vector<int> labels;
  /// Per class; empty means all ones.
  std::vector<double> class_weights;
};

struct LayerCache;

/// Intermediates kept by forward() for the backward pass.
struct ForwardCache {
  Head head = Head::target;
  std::vector<LayerCache> layers;
  ForwardCache();
  ~ForwardCache();
  ForwardCache(ForwardCache&&) noexcept;
  ForwardCache& operator=(ForwardCache&&) noexcept;
};

struct ForwardResult {
  Tensor logits;  // n x units
  ForwardCache cache;
};

ForwardResult forward(const NetworkSpec& spec, const ParamSet& params, const Tensor& inputs,
                      Head head);

/// Class probabilities, n x units.
Tensor softmax(const Tensor& logits);

struct LossAndGrads {
  double loss = 0.0;
  Gradients grads;
};

/// Weighted softmax cross-entropy, (1/n) sum_i w[y_i] * -log p_i[y_i], with
/// gradients for the trunk and the selected head.
LossAndGrads loss_and_grads(const NetworkSpec& spec, const ParamSet& params, const Batch& batch,
                            Head head);

double batch_loss(const NetworkSpec& spec, const ParamSet& params, const Batch& batch, Head head);

/// v <- momentum * v - lr * g; w <- w + v, for each slot present in grads.
void sgd_step(ParamSet& params, const Gradients& grads, double lr, double momentum);

struct GradientCheckOptions {
  double eps = 1e-5;
  /// Coordinates sampled per slot; slots at most this large are checked fully.
  std::size_t coords_per_slot = 24;
  std::uint64_t seed = 0;
  /// Evaluate the probes with the relu masks and maxpool winners of the
  /// unperturbed pass, so a probe step cannot cross a kink.
  bool freeze_kinks = true;
};

/// Max relative error |a - n| / max(|a|, |n|, f) between analytic and
/// central-difference gradients over sampled coordinates, where f is 1e-3 of
/// the slot's largest analytic gradient magnitude (at least 1e-12). Away from a kink
/// the loss equals its frozen-pattern version in a neighbourhood, so both
/// share the gradient, but only the latter is smooth across the whole step.
double gradient_check(const NetworkSpec& spec, const ParamSet& params, const Batch& batch,
                      Head head, const GradientCheckOptions& options = {});

/// As gradient_check, but against caller-supplied analytic gradients.
double compare_gradients(const NetworkSpec& spec, const ParamSet& params, const Batch& batch,
                         Head head, const Gradients& analytic,
                         const GradientCheckOptions& options = {});

}  // namespace rebalance
