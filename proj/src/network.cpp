#include "rebalance/network.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "rebalance/error.hpp"
#include "rebalance/rng.hpp"

namespace rebalance {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

struct Shape {
  bool flat = false;
  int c = 0, h = 0, w = 0;
  int features() const { return flat ? c : c * h * w; }
};

std::string_view kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
  }
  return "?";
}

Shape next_shape(const Shape& in, const LayerSpec& l, const std::string& where) {
  auto fail = [&](const std::string& why) { throw UsageError("network spec: " + where + ": " + why); };
  Shape out = in;
  switch (l.kind) {
    case LayerKind::conv:
      if (in.flat) fail("conv after flatten");
      if (l.out_channels < 1 || l.kernel_size < 1 || l.stride < 1) fail("bad conv parameters");
      if (l.kernel_size > in.h || l.kernel_size > in.w) fail("conv kernel larger than its input");
      out.c = l.out_channels;
      out.h = (in.h - l.kernel_size) / l.stride + 1;
      out.w = (in.w - l.kernel_size) / l.stride + 1;
      break;
    case LayerKind::relu:
      break;
    case LayerKind::maxpool:
      if (in.flat) fail("maxpool after flatten");
      if (l.window < 1 || l.window > in.h || l.window > in.w) fail("bad pooling window");
      out.h = in.h / l.window;
      out.w = in.w / l.window;
      break;
    case LayerKind::flatten:
      out = Shape{true, in.features(), 1, 1};
      break;
    case LayerKind::dense:
      if (!in.flat) fail("dense needs a flattened input");
      if (l.units < 1) fail("dense needs units >= 1");
      out = Shape{true, l.units, 1, 1};
      break;
  }
  return out;
}

std::vector<Shape> trunk_shapes(const NetworkSpec& spec) {
  if (spec.input_channels < 1 || spec.input_height < 1 || spec.input_width < 1) {
    throw UsageError("network spec: input dimensions must be positive");
  }
  std::vector<Shape> shapes{Shape{false, spec.input_channels, spec.input_height, spec.input_width}};
  for (std::size_t i = 0; i < spec.trunk.size(); ++i) {
    shapes.push_back(next_shape(shapes.back(), spec.trunk[i], "trunk layer " + std::to_string(i)));
  }
  return shapes;
}

std::vector<Shape> head_shapes(const Shape& in, const std::vector<LayerSpec>& head,
                               const std::string& name) {
  std::vector<Shape> shapes{in};
  for (std::size_t i = 0; i < head.size(); ++i) {
    shapes.push_back(next_shape(shapes.back(), head[i], name + " layer " + std::to_string(i)));
  }
  return shapes;
}

const std::vector<LayerSpec>& head_layers(const NetworkSpec& spec, Head head) {
  return head == Head::target ? spec.target_head : spec.source_head;
}

std::string slot_name(const std::string& prefix, std::size_t layer, bool bias) {
  return prefix + "." + std::to_string(layer) + (bias ? ".bias" : ".weight");
}

struct SlotPlan {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t fan_in = 0;
  bool bias = false;
};

void plan_section(const std::string& prefix, const std::vector<LayerSpec>& layers,
                  const std::vector<Shape>& shapes, std::vector<SlotPlan>& out) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const Shape& in = shapes[i];
    if (l.kind == LayerKind::conv) {
      const std::size_t k = static_cast<std::size_t>(l.kernel_size);
      const std::size_t fan_in = static_cast<std::size_t>(in.c) * k * k;
      out.push_back({slot_name(prefix, i, false),
                     {static_cast<std::size_t>(l.out_channels), static_cast<std::size_t>(in.c), k, k},
                     fan_in, false});
      out.push_back({slot_name(prefix, i, true), {static_cast<std::size_t>(l.out_channels)}, 0, true});
    } else if (l.kind == LayerKind::dense) {
      const auto fan_in = static_cast<std::size_t>(in.features());
      out.push_back({slot_name(prefix, i, false), {static_cast<std::size_t>(l.units), fan_in}, fan_in, false});
      out.push_back({slot_name(prefix, i, true), {static_cast<std::size_t>(l.units)}, 0, true});
    }
  }
}

std::vector<SlotPlan> plan_slots(const NetworkSpec& spec) {
  const auto trunk = trunk_shapes(spec);
  std::vector<SlotPlan> plan;
  plan_section("trunk", spec.trunk, trunk, plan);
  plan_section("target", spec.target_head, head_shapes(trunk.back(), spec.target_head, "target head"), plan);
  if (!spec.source_head.empty()) {
    plan_section("source", spec.source_head, head_shapes(trunk.back(), spec.source_head, "source head"), plan);
  }
  return plan;
}

ParamSlot make_slot(const SlotPlan& p, std::uint64_t seed) {
  ParamSlot slot{p.name, Tensor(p.shape), Tensor(p.shape)};
  if (!p.bias) {
    Rng rng(derive_seed(seed, p.name));
    const double stddev = std::sqrt(2.0 / static_cast<double>(p.fan_in));
    for (double& v : slot.value.data) v = rng.normal(0.0, stddev);
  }
  return slot;
}

LayerKind parse_kind(const std::string& s) {
  for (auto k : {LayerKind::conv, LayerKind::relu, LayerKind::maxpool, LayerKind::flatten, LayerKind::dense}) {
    if (kind_name(k) == s) return k;
  }
  throw UsageError("unknown layer kind '" + s + "'");
}

nlohmann::json layers_to_json(const std::vector<LayerSpec>& layers) {
  auto arr = nlohmann::json::array();
  for (const auto& l : layers) {
    nlohmann::json j{{"kind", kind_name(l.kind)}};
    switch (l.kind) {
      case LayerKind::conv:
        j["out_channels"] = l.out_channels;
        j["kernel_size"] = l.kernel_size;
        j["stride"] = l.stride;
        break;
      case LayerKind::maxpool: j["window"] = l.window; break;
      case LayerKind::dense: j["units"] = l.units; break;
      default: break;
    }
    arr.push_back(j);
  }
  return arr;
}

std::vector<LayerSpec> layers_from_json(const nlohmann::json& arr) {
  std::vector<LayerSpec> out;
  for (const auto& j : arr) {
    const auto kind = parse_kind(j.at("kind").get<std::string>());
    switch (kind) {
      case LayerKind::conv:
        out.push_back(LayerSpec::conv(j.at("out_channels").get<int>(), j.at("kernel_size").get<int>(),
                                      j.value("stride", 1)));
        break;
      case LayerKind::maxpool: out.push_back(LayerSpec::maxpool(j.at("window").get<int>())); break;
      case LayerKind::dense: out.push_back(LayerSpec::dense(j.at("units").get<int>())); break;
      case LayerKind::relu: out.push_back(LayerSpec::relu()); break;
      case LayerKind::flatten: out.push_back(LayerSpec::flatten()); break;
    }
  }
  return out;
}

// --- layer kernels -----------------------------------------------------------

Tensor conv_forward(const Tensor& in, const Tensor& weight, const Tensor& bias, int stride,
                    AlignedVector& col) {
  const auto n = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  const auto O = weight.dim(0), k = weight.dim(2);
  const auto s = static_cast<std::size_t>(stride);
  const std::size_t OH = (H - k) / s + 1, OW = (W - k) / s + 1;
  const std::size_t K = C * k * k, P = OH * OW;

  col.assign(n * K * P, 0.0);
  Tensor out({n, O, OH, OW});
  const ConstMapMat wm(weight.data.data(), static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(K));
  for (std::size_t b = 0; b < n; ++b) {
    double* col_b = col.data() + b * K * P;
    const double* in_b = in.data.data() + b * C * H * W;
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          double* row = col_b + ((c * k + ky) * k + kx) * P;
          for (std::size_t oy = 0; oy < OH; ++oy) {
            const double* src = in_b + (c * H + oy * s + ky) * W + kx;
            double* dst = row + oy * OW;
            for (std::size_t ox = 0; ox < OW; ++ox) dst[ox] = src[ox * s];
          }
        }
      }
    }
    const ConstMapMat colm(col_b, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
    MapMat outm(out.data.data() + b * O * P, static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(P));
    outm.noalias() = wm * colm;
    for (std::size_t o = 0; o < O; ++o) outm.row(static_cast<Eigen::Index>(o)).array() += bias.data[o];
  }
  return out;
}

// Accumulates weight/bias grads; writes the input grad when `din` is non-null.
void conv_backward(const Tensor& in, const Tensor& weight, int stride, const AlignedVector& col,
                   const Tensor& dout, Tensor& dweight, Tensor& dbias, Tensor* din) {
  const auto n = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  const auto O = weight.dim(0), k = weight.dim(2);
  const auto s = static_cast<std::size_t>(stride);
  const std::size_t OH = dout.dim(2), OW = dout.dim(3);
  const std::size_t K = C * k * k, P = OH * OW;

  const ConstMapMat wm(weight.data.data(), static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(K));
  MapMat dwm(dweight.data.data(), static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(K));
  AlignedVector dcol(din ? K * P : 0);
  if (din) *din = Tensor(in.shape);

  for (std::size_t b = 0; b < n; ++b) {
    const ConstMapMat colm(col.data() + b * K * P, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
    const ConstMapMat doutm(dout.data.data() + b * O * P, static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(P));
    dwm.noalias() += doutm * colm.transpose();
    for (std::size_t o = 0; o < O; ++o) dbias.data[o] += doutm.row(static_cast<Eigen::Index>(o)).sum();
    if (!din) continue;

    MapMat dcolm(dcol.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
    dcolm.noalias() = wm.transpose() * doutm;
    double* din_b = din->data.data() + b * C * H * W;
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double* row = dcol.data() + ((c * k + ky) * k + kx) * P;
          for (std::size_t oy = 0; oy < OH; ++oy) {
            double* dst = din_b + (c * H + oy * s + ky) * W + kx;
            const double* src = row + oy * OW;
            for (std::size_t ox = 0; ox < OW; ++ox) dst[ox * s] += src[ox];
          }
        }
      }
    }
  }
}

Tensor maxpool_forward(const Tensor& in, int window, std::vector<std::uint32_t>& argmax) {
  const auto n = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  const auto w = static_cast<std::size_t>(window);
  const std::size_t OH = H / w, OW = W / w;
  Tensor out({n, C, OH, OW});
  argmax.assign(out.size(), 0);
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < n * C; ++plane) {
    const std::size_t base = plane * H * W;
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox, ++o) {
        std::size_t best = base + (oy * w) * W + ox * w;
        for (std::size_t dy = 0; dy < w; ++dy) {
          for (std::size_t dx = 0; dx < w; ++dx) {
            const std::size_t idx = base + (oy * w + dy) * W + ox * w + dx;
            if (in.data[idx] > in.data[best]) best = idx;
          }
        }
        out.data[o] = in.data[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return out;
}

Tensor dense_forward(const Tensor& in, const Tensor& weight, const Tensor& bias) {
  const auto n = in.dim(0), F = in.dim(1), U = weight.dim(0);
  Tensor out({n, U});
  const ConstMapMat x(in.data.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(F));
  const ConstMapMat wm(weight.data.data(), static_cast<Eigen::Index>(U), static_cast<Eigen::Index>(F));
  MapMat y(out.data.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(U));
  y.noalias() = x * wm.transpose();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t u = 0; u < U; ++u) out.data[i * U + u] += bias.data[u];
  }
  return out;
}

void dense_backward(const Tensor& in, const Tensor& weight, const Tensor& dout, Tensor& dweight,
                    Tensor& dbias, Tensor* din) {
  const auto n = in.dim(0), F = in.dim(1), U = weight.dim(0);
  const ConstMapMat x(in.data.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(F));
  const ConstMapMat wm(weight.data.data(), static_cast<Eigen::Index>(U), static_cast<Eigen::Index>(F));
  const ConstMapMat dy(dout.data.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(U));
  MapMat dwm(dweight.data.data(), static_cast<Eigen::Index>(U), static_cast<Eigen::Index>(F));
  dwm.noalias() += dy.transpose() * x;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t u = 0; u < U; ++u) dbias.data[u] += dout.data[i * U + u];
  }
  if (din) {
    *din = Tensor(in.shape);
    MapMat dx(din->data.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(F));
    dx.noalias() = dy * wm;
  }
}

struct LayerRef {
  const LayerSpec* layer;
  std::string prefix;
  std::size_t index;
};

std::vector<LayerRef> layer_sequence(const NetworkSpec& spec, Head head) {
  const auto& hl = head_layers(spec, head);
  if (hl.empty()) throw UsageError("network has no " + slot_prefix(head) + " head");
  std::vector<LayerRef> seq;
  for (std::size_t i = 0; i < spec.trunk.size(); ++i) seq.push_back({&spec.trunk[i], "trunk", i});
  for (std::size_t i = 0; i < hl.size(); ++i) seq.push_back({&hl[i], slot_prefix(head), i});
  return seq;
}

const ParamSlot& require_slot(const ParamSet& params, const std::string& name) {
  const ParamSlot* slot = params.find(name);
  if (!slot) throw CompatibilityError("parameter set has no slot " + name);
  return *slot;
}

}  // namespace

struct LayerCache {
  Tensor input;
  AlignedVector col;
  std::vector<std::uint32_t> argmax;
};

ForwardCache::ForwardCache() = default;
ForwardCache::~ForwardCache() = default;
ForwardCache::ForwardCache(ForwardCache&&) noexcept = default;
ForwardCache& ForwardCache::operator=(ForwardCache&&) noexcept = default;

NetworkSpec default_network_spec(int height, int width, int source_classes) {
  NetworkSpec spec;
  spec.input_height = height;
  spec.input_width = width;
  spec.trunk = {LayerSpec::conv(8, 5), LayerSpec::relu(), LayerSpec::maxpool(2),
                LayerSpec::conv(16, 5), LayerSpec::relu(), LayerSpec::maxpool(2)};
  spec.target_head = {LayerSpec::flatten(), LayerSpec::dense(64), LayerSpec::relu(), LayerSpec::dense(2)};
  if (source_classes > 0) {
    spec.source_head = {LayerSpec::flatten(), LayerSpec::dense(64), LayerSpec::relu(),
                        LayerSpec::dense(source_classes)};
  }
  return spec;
}

NetworkSpec desk_network_spec(int height, int width, int source_classes) {
  NetworkSpec spec;
  spec.input_height = height;
  spec.input_width = width;
  spec.trunk = {LayerSpec::conv(8, 5, 2), LayerSpec::relu(), LayerSpec::maxpool(2),
                LayerSpec::conv(16, 3), LayerSpec::relu(), LayerSpec::maxpool(2)};
  spec.target_head = {LayerSpec::flatten(), LayerSpec::dense(32), LayerSpec::relu(), LayerSpec::dense(2)};
  if (source_classes > 0) {
    spec.source_head = {LayerSpec::flatten(), LayerSpec::dense(32), LayerSpec::relu(),
                        LayerSpec::dense(source_classes)};
  }
  return spec;
}

NetworkSpec with_source_classes(NetworkSpec spec, int source_classes) {
  if (source_classes < 2) throw UsageError("source head needs at least 2 classes");
  if (spec.source_head.empty()) spec.source_head = spec.target_head;
  spec.source_head.back() = LayerSpec::dense(source_classes);
  return spec;
}

NetworkSpec without_source_head(NetworkSpec spec) {
  spec.source_head.clear();
  return spec;
}

void validate(const NetworkSpec& spec) {
  const auto trunk = trunk_shapes(spec);
  if (spec.target_head.empty()) throw UsageError("network spec: empty target head");
  head_shapes(trunk.back(), spec.target_head, "target head");
  const auto& t = spec.target_head.back();
  if (t.kind != LayerKind::dense || t.units != 2) {
    throw UsageError("network spec: target head must end in dense{2}");
  }
  if (!spec.source_head.empty()) {
    head_shapes(trunk.back(), spec.source_head, "source head");
    if (spec.source_head.back().kind != LayerKind::dense) {
      throw UsageError("network spec: source head must end in a dense layer");
    }
  }
}

nlohmann::json to_json(const NetworkSpec& spec) {
  return {{"input", {spec.input_channels, spec.input_height, spec.input_width}},
          {"trunk", layers_to_json(spec.trunk)},
          {"target_head", layers_to_json(spec.target_head)},
          {"source_head", layers_to_json(spec.source_head)}};
}

NetworkSpec network_spec_from_json(const nlohmann::json& j) {
  try {
    NetworkSpec spec;
    const auto& in = j.at("input");
    spec.input_channels = in.at(0).get<int>();
    spec.input_height = in.at(1).get<int>();
    spec.input_width = in.at(2).get<int>();
    spec.trunk = layers_from_json(j.at("trunk"));
    spec.target_head = layers_from_json(j.at("target_head"));
    if (j.contains("source_head")) spec.source_head = layers_from_json(j.at("source_head"));
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("malformed network spec: ") + e.what());
  }
}

ParamSlot* ParamSet::find(const std::string& name) {
  for (auto& s : slots) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

const ParamSlot* ParamSet::find(const std::string& name) const {
  for (const auto& s : slots) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

std::string slot_prefix(Head head) { return head == Head::target ? "target" : "source"; }

bool slot_in_head(const std::string& slot_name, const std::string& prefix) {
  return slot_name.size() > prefix.size() && slot_name.compare(0, prefix.size(), prefix) == 0 &&
         slot_name[prefix.size()] == '.';
}

ParamSet init_params(const NetworkSpec& spec, std::uint64_t seed) {
  validate(spec);
  ParamSet params;
  for (const auto& p : plan_slots(spec)) params.slots.push_back(make_slot(p, seed));
  return params;
}

void reinit_head(const NetworkSpec& spec, ParamSet& params, Head head, std::uint64_t seed) {
  const std::string prefix = slot_prefix(head);
  for (const auto& p : plan_slots(spec)) {
    if (!slot_in_head(p.name, prefix)) continue;
    ParamSlot* slot = params.find(p.name);
    if (!slot) throw CompatibilityError("parameter set has no slot " + p.name);
    *slot = make_slot(p, seed);
  }
}

ParamSet drop_head(const ParamSet& params, Head head) {
  const std::string prefix = slot_prefix(head);
  ParamSet out;
  for (const auto& s : params.slots) {
    if (!slot_in_head(s.name, prefix)) out.slots.push_back(s);
  }
  return out;
}

void check_params_match(const NetworkSpec& spec, const ParamSet& params) {
  const auto plan = plan_slots(spec);
  if (plan.size() != params.slots.size()) {
    throw CompatibilityError("parameter set has " + std::to_string(params.slots.size()) +
                             " slots, spec expects " + std::to_string(plan.size()));
  }
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const auto& slot = params.slots[i];
    if (slot.name != plan[i].name || slot.value.shape != plan[i].shape ||
        slot.momentum.shape != plan[i].shape) {
      throw CompatibilityError("parameter slot " + slot.name + " does not match the network layout");
    }
  }
}

namespace {

// With `frozen`, relu masks and maxpool winners are taken from that earlier
// pass instead of the current activations.
ForwardResult forward_impl(const NetworkSpec& spec, const ParamSet& params, const Tensor& inputs,
                           Head head, const ForwardCache* frozen) {
  if (inputs.shape.size() != 4 || inputs.dim(1) != static_cast<std::size_t>(spec.input_channels) ||
      inputs.dim(2) != static_cast<std::size_t>(spec.input_height) ||
      inputs.dim(3) != static_cast<std::size_t>(spec.input_width)) {
    throw UsageError("forward: input shape does not match the network spec");
  }
  const auto seq = layer_sequence(spec, head);
  ForwardResult result;
  result.cache.head = head;
  result.cache.layers.resize(seq.size());
  Tensor x = inputs;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const LayerSpec& l = *seq[i].layer;
    LayerCache& cache = result.cache.layers[i];
    Tensor y;
    switch (l.kind) {
      case LayerKind::conv: {
        const auto& w = require_slot(params, slot_name(seq[i].prefix, seq[i].index, false));
        const auto& b = require_slot(params, slot_name(seq[i].prefix, seq[i].index, true));
        y = conv_forward(x, w.value, b.value, l.stride, cache.col);
        break;
      }
      case LayerKind::relu:
        y = x;
        if (frozen) {
          const auto& mask = frozen->layers[i].input.data;
          for (std::size_t j = 0; j < y.size(); ++j) y.data[j] = mask[j] > 0.0 ? y.data[j] : 0.0;
        } else {
          for (double& v : y.data) v = v > 0.0 ? v : 0.0;
        }
        break;
      case LayerKind::maxpool:
        y = maxpool_forward(x, l.window, cache.argmax);
        if (frozen) {
          cache.argmax = frozen->layers[i].argmax;
          for (std::size_t j = 0; j < y.size(); ++j) y.data[j] = x.data[cache.argmax[j]];
        }
        break;
      case LayerKind::flatten:
        y = x;
        y.shape = {x.dim(0), x.size() / x.dim(0)};
        break;
      case LayerKind::dense: {
        const auto& w = require_slot(params, slot_name(seq[i].prefix, seq[i].index, false));
        const auto& b = require_slot(params, slot_name(seq[i].prefix, seq[i].index, true));
        if (x.shape.size() != 2 || x.dim(1) != w.value.dim(1)) {
          throw UsageError("forward: dense input width mismatch");
        }
        y = dense_forward(x, w.value, b.value);
        break;
      }
    }
    cache.input = std::move(x);
    x = std::move(y);
  }
  result.logits = std::move(x);
  return result;
}

}  // namespace

ForwardResult forward(const NetworkSpec& spec, const ParamSet& params, const Tensor& inputs,
                      Head head) {
  return forward_impl(spec, params, inputs, head, nullptr);
}

Tensor softmax(const Tensor& logits) {
  Tensor p = logits;
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double* row = p.data.data() + i * k;
    const double peak = *std::max_element(row, row + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      row[j] = std::exp(row[j] - peak);
      sum += row[j];
    }
    for (std::size_t j = 0; j < k; ++j) row[j] /= sum;
  }
  return p;
}

namespace {

// Returns the loss and writes dL/dlogits.
double softmax_cross_entropy(const Tensor& logits, const Batch& batch, Tensor* dlogits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (batch.labels.size() != n) throw UsageError("batch: label count does not match inputs");
  if (!batch.class_weights.empty() && batch.class_weights.size() != k) {
    throw UsageError("batch: class_weights length must equal the head's class count");
  }
  for (int y : batch.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw UsageError("batch: label " + std::to_string(y) + " out of range");
    }
  }
  for (double w : batch.class_weights) {
    if (!(w >= 0.0)) throw UsageError("batch: class weights must be >= 0");
  }
  if (dlogits) *dlogits = Tensor(logits.shape);
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = logits.data.data() + i * k;
    const auto y = static_cast<std::size_t>(batch.labels[i]);
    const double w = batch.class_weights.empty() ? 1.0 : batch.class_weights[y];
    const double peak = *std::max_element(z, z + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(z[j] - peak);
    const double log_sum = std::log(sum);
    if (w != 0.0) loss += w * (log_sum - (z[y] - peak));
    if (dlogits) {
      double* g = dlogits->data.data() + i * k;
      for (std::size_t j = 0; j < k; ++j) {
        const double p = std::exp(z[j] - peak - log_sum);
        g[j] = w * inv_n * (p - (j == y ? 1.0 : 0.0));
      }
    }
  }
  const double result = loss * inv_n;
  if (!std::isfinite(result)) throw NumericError("loss is not finite");
  return result;
}

}  // namespace

double batch_loss(const NetworkSpec& spec, const ParamSet& params, const Batch& batch, Head head) {
  const auto fwd = forward(spec, params, batch.inputs, head);
  return softmax_cross_entropy(fwd.logits, batch, nullptr);
}

LossAndGrads loss_and_grads(const NetworkSpec& spec, const ParamSet& params, const Batch& batch,
                            Head head) {
  auto fwd = forward(spec, params, batch.inputs, head);
  LossAndGrads out;
  Tensor grad;
  out.loss = softmax_cross_entropy(fwd.logits, batch, &grad);

  const auto seq = layer_sequence(spec, head);
  std::map<std::string, Tensor> grads;
  for (std::size_t ii = seq.size(); ii-- > 0;) {
    const LayerSpec& l = *seq[ii].layer;
    LayerCache& cache = fwd.cache.layers[ii];
    const bool need_input_grad = ii > 0;
    Tensor din;
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::dense: {
        const std::string wn = slot_name(seq[ii].prefix, seq[ii].index, false);
        const std::string bn = slot_name(seq[ii].prefix, seq[ii].index, true);
        const auto& w = require_slot(params, wn);
        const auto& b = require_slot(params, bn);
        Tensor dw(w.value.shape), db(b.value.shape);
        if (l.kind == LayerKind::conv) {
          conv_backward(cache.input, w.value, l.stride, cache.col, grad, dw, db,
                        need_input_grad ? &din : nullptr);
        } else {
          dense_backward(cache.input, w.value, grad, dw, db, need_input_grad ? &din : nullptr);
        }
        grads.emplace(wn, std::move(dw));
        grads.emplace(bn, std::move(db));
        break;
      }
      case LayerKind::relu:
        din = std::move(grad);
        for (std::size_t j = 0; j < din.size(); ++j) {
          if (!(cache.input.data[j] > 0.0)) din.data[j] = 0.0;
        }
        break;
      case LayerKind::maxpool:
        din = Tensor(cache.input.shape);
        for (std::size_t j = 0; j < grad.size(); ++j) din.data[cache.argmax[j]] += grad.data[j];
        break;
      case LayerKind::flatten:
        din = std::move(grad);
        din.shape = cache.input.shape;
        break;
    }
    grad = std::move(din);
  }

  for (const auto& slot : params.slots) {
    auto it = grads.find(slot.name);
    if (it != grads.end()) out.grads.push_back({slot.name, std::move(it->second)});
  }
  return out;
}

void sgd_step(ParamSet& params, const Gradients& grads, double lr, double momentum) {
  if (!(lr >= 0.0)) throw UsageError("sgd_step: learning rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw UsageError("sgd_step: momentum must lie in [0, 1)");
  for (const auto& g : grads) {
    ParamSlot* slot = params.find(g.name);
    if (!slot) throw UsageError("sgd_step: no parameter slot " + g.name);
    if (slot->value.shape != g.value.shape) throw UsageError("sgd_step: shape mismatch for " + g.name);
    auto& w = slot->value.data;
    auto& v = slot->momentum.data;
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum * v[i] - lr * g.value.data[i];
      w[i] += v[i];
    }
  }
}

constexpr double kRelativeFloor = 1e-3;

double compare_gradients(const NetworkSpec& spec, const ParamSet& params, const Batch& batch,
                         Head head, const Gradients& analytic, const GradientCheckOptions& options) {
  if (!(options.eps > 0.0)) throw UsageError("gradient_check: eps must be > 0");
  ParamSet probe = params;
  const ForwardResult base = forward(spec, params, batch.inputs, head);
  const ForwardCache* frozen = options.freeze_kinks ? &base.cache : nullptr;
  auto loss_at = [&] {
    return softmax_cross_entropy(forward_impl(spec, probe, batch.inputs, head, frozen).logits, batch, nullptr);
  };
  Rng rng(options.seed);
  double worst = 0.0;
  for (const auto& g : analytic) {
    ParamSlot* slot = probe.find(g.name);
    if (!slot) throw UsageError("gradient_check: no parameter slot " + g.name);
    const std::size_t n = slot->value.size();
    std::vector<std::size_t> coords;
    if (n <= options.coords_per_slot) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      coords = sample_indices(n, options.coords_per_slot, rng);
    }
    // Below this magnitude a central difference is dominated by rounding in
    // the loss, so smaller coordinates are measured against it instead.
    double floor = 1e-12;
    for (double v : g.value.data) floor = std::max(floor, kRelativeFloor * std::abs(v));
    for (const auto i : coords) {
      const double original = slot->value.data[i];
      slot->value.data[i] = original + options.eps;
      const double plus = loss_at();
      slot->value.data[i] = original - options.eps;
      const double minus = loss_at();
      slot->value.data[i] = original;
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double a = g.value.data[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

double gradient_check(const NetworkSpec& spec, const ParamSet& params, const Batch& batch,
                      Head head, const GradientCheckOptions& options) {
  if (!(options.eps > 0.0)) throw UsageError("gradient_check: eps must be > 0");
  const auto lg = loss_and_grads(spec, params, batch, head);
  return compare_gradients(spec, params, batch, head, lg.grads, options);
}

}  // namespace rebalance
