#include "forge/network.hpp"

#include <cmath>
#include <random>
#include <set>

#include "forge/ops.hpp"

namespace forge {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

LayerKind parse_layer_kind(std::string_view s) {
  for (auto k : {LayerKind::conv, LayerKind::dense, LayerKind::relu, LayerKind::maxpool, LayerKind::flatten}) {
    if (to_string(k) == s) return k;
  }
  throw FormatError("unknown layer kind '" + std::string(s) + "'");
}

LayerSpec LayerSpec::conv(std::string name, std::size_t in, std::size_t out, std::size_t kernel,
                          std::size_t stride, std::size_t padding) {
  return {LayerKind::conv, std::move(name), in, out, kernel, stride, padding, true};
}
LayerSpec LayerSpec::dense(std::string name, std::size_t in, std::size_t out) {
  return {LayerKind::dense, std::move(name), in, out, 0, 1, 0, true};
}
LayerSpec LayerSpec::relu(std::string name) { return {LayerKind::relu, std::move(name)}; }
LayerSpec LayerSpec::maxpool(std::string name, std::size_t window, std::size_t stride) {
  return {LayerKind::maxpool, std::move(name), 0, 0, window, stride, 0, false};
}
LayerSpec LayerSpec::flatten(std::string name) { return {LayerKind::flatten, std::move(name)}; }

namespace {

// Per-sample output shape of `spec` given per-sample input shape.
Shape infer_shape(const LayerSpec& spec, const Shape& in) {
  switch (spec.kind) {
    case LayerKind::conv: {
      if (in.size() != 3 || in[0] != spec.in) {
        throw DimensionError("layer " + spec.name + " expects " + std::to_string(spec.in) +
                             " input channels, got " + to_string(in));
      }
      const ops::Conv2dParams p{spec.stride, spec.padding};
      return {spec.out, ops::conv_output_extent(in[1], spec.kernel, p),
              ops::conv_output_extent(in[2], spec.kernel, p)};
    }
    case LayerKind::dense:
      if (shape_numel(in) != spec.in) {
        throw DimensionError("layer " + spec.name + " expects " + std::to_string(spec.in) +
                             " features, got " + to_string(in));
      }
      return {spec.out};
    case LayerKind::maxpool: {
      if (in.size() != 3) throw DimensionError("layer " + spec.name + " needs a [C,H,W] input");
      const ops::Conv2dParams p{spec.stride, 0};
      return {in[0], ops::conv_output_extent(in[1], spec.kernel, p),
              ops::conv_output_extent(in[2], spec.kernel, p)};
    }
    case LayerKind::flatten: return {shape_numel(in)};
    case LayerKind::relu: return in;
  }
  return in;
}


}  // namespace

Network::Network(std::string model_name, std::vector<LayerSpec> layers, Shape input_shape, std::size_t classes)
    : model_name_(std::move(model_name)),
      layers_(std::move(layers)),
      input_shape_(std::move(input_shape)),
      classes_(classes) {
  if (layers_.empty()) throw InputError("network needs at least one layer");
  std::set<std::string> names;
  Shape shape = input_shape_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& spec = layers_[i];
    if (!names.insert(spec.name).second) throw InputError("duplicate layer name '" + spec.name + "'");
    if (spec.compressible && !spec.has_parameters()) {
      throw InputError("layer '" + spec.name + "' is marked compressible but has no weights");
    }
    shape = infer_shape(spec, shape);
    weight_of_layer_.emplace_back();
    bias_of_layer_.emplace_back();
    if (spec.kind == LayerKind::conv) {
      weight_of_layer_.back() = params_.size();
      params_.push_back({spec.name + ".weight", i, true, Tensor({spec.out, spec.in, spec.kernel, spec.kernel})});
      bias_of_layer_.back() = params_.size();
      params_.push_back({spec.name + ".bias", i, false, Tensor({spec.out})});
    } else if (spec.kind == LayerKind::dense) {
      weight_of_layer_.back() = params_.size();
      params_.push_back({spec.name + ".weight", i, true, Tensor({spec.out, spec.in})});
      bias_of_layer_.back() = params_.size();
      params_.push_back({spec.name + ".bias", i, false, Tensor({spec.out})});
    }
  }
  if (shape != Shape{classes_}) {
    throw DimensionError("network output " + to_string(shape) + " does not match " + std::to_string(classes_) +
                         " classes");
  }
}

void Network::initialize(std::uint64_t seed) {
  init_seed_ = seed;
  std::mt19937_64 rng(seed);
  for (auto& p : params_) {
    if (!p.is_weight) {
      p.value.fill(0.0f);
      continue;
    }
    const std::size_t fan_in = p.value.numel() / p.value.dim(0);
    const float bound = static_cast<float>(std::sqrt(6.0 / static_cast<double>(fan_in)));
    std::uniform_real_distribution<float> dist(-bound, bound);
    for (auto& v : p.value.data()) v = dist(rng);
  }
}

Tensor Network::forward(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& spec = layers_[i];
    switch (spec.kind) {
      case LayerKind::conv:
        h = ops::conv2d(h, params_[*weight_of_layer_[i]].value, params_[*bias_of_layer_[i]].value,
                        {spec.stride, spec.padding});
        break;
      case LayerKind::dense:
        h = ops::dense(h, params_[*weight_of_layer_[i]].value, params_[*bias_of_layer_[i]].value);
        break;
      case LayerKind::relu: h = ops::relu(h); break;
      case LayerKind::maxpool: h = ops::maxpool2d(h, spec.kernel, spec.stride); break;
      case LayerKind::flatten: h = h.reshaped({h.dim(0), h.numel() / h.dim(0)}); break;
    }
  }
  return h;
}

Tensor Network::forward(const Tensor& x, GradTape& tape) const {
  tape.net_ = this;
  tape.records_.assign(layers_.size(), {});
  tape.grads_.clear();
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& spec = layers_[i];
    auto& rec = tape.records_[i];
    switch (spec.kind) {
      case LayerKind::conv:
        rec.input = h;
        h = ops::conv2d(h, params_[*weight_of_layer_[i]].value, params_[*bias_of_layer_[i]].value,
                        {spec.stride, spec.padding});
        break;
      case LayerKind::dense:
        rec.input = h;
        h = ops::dense(h, params_[*weight_of_layer_[i]].value, params_[*bias_of_layer_[i]].value);
        break;
      case LayerKind::relu:
        h = ops::relu(h);
        rec.input = h;  // relu output carries the same sign pattern as its input
        break;
      case LayerKind::maxpool:
        rec.input = Tensor(h.shape());
        h = ops::maxpool2d(h, spec.kernel, spec.stride, &rec.argmax);
        break;
      case LayerKind::flatten:
        rec.input = Tensor(h.shape());
        h = h.reshaped({h.dim(0), h.numel() / h.dim(0)});
        break;
    }
  }
  return h;
}

void GradTape::backward(const Tensor& dlogits) {
  if (!net_) throw StateError("GradTape::backward called before a recorded forward pass");
  const Network& net = *net_;
  grads_.clear();
  for (const auto& p : net.params_) grads_.emplace_back(p.value.shape());
  // Layers before the first parameterized one need no input gradient.
  std::size_t first_param = 0;
  while (first_param < net.layers_.size() && !net.layers_[first_param].has_parameters()) ++first_param;
  Tensor d = dlogits;
  for (std::size_t i = net.layers_.size(); i-- > first_param;) {
    const LayerSpec& spec = net.layers_[i];
    auto& rec = records_[i];
    switch (spec.kind) {
      case LayerKind::conv: {
        const std::size_t wi = *net.weight_of_layer_[i], bi = *net.bias_of_layer_[i];
        auto g = ops::conv2d_backward(rec.input, net.params_[wi].value, d, {spec.stride, spec.padding},
                                              /*need_dx=*/i > first_param);
        grads_[wi] = std::move(g.dw);
        grads_[bi] = std::move(g.dbias);
        d = std::move(g.dx);
        break;
      }
      case LayerKind::dense: {
        const std::size_t wi = *net.weight_of_layer_[i], bi = *net.bias_of_layer_[i];
        const Tensor x2 = rec.input.rank() == 2 ? rec.input
                                                : rec.input.reshaped({rec.input.dim(0), rec.input.numel() / rec.input.dim(0)});
        auto g = ops::dense_backward(x2, net.params_[wi].value, d);
        grads_[wi] = std::move(g.dw);
        grads_[bi] = std::move(g.dbias);
        d = g.dx.reshaped(rec.input.shape());
        break;
      }
      case LayerKind::relu: d = ops::relu_backward(rec.input, d); break;
      case LayerKind::maxpool: d = ops::maxpool2d_backward<float>(rec.input.shape(), rec.argmax, d); break;
      case LayerKind::flatten: d = d.reshaped(rec.input.shape()); break;
    }
  }
}

std::vector<std::string> Network::compressible_layers() const {
  std::vector<std::string> out;
  for (const auto& l : layers_) {
    if (l.compressible) out.push_back(l.name);
  }
  return out;
}

namespace {
std::size_t layer_position(const std::vector<LayerSpec>& layers, std::string_view name) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].name == name) return i;
  }
  throw InputError("no layer named '" + std::string(name) + "'");
}
}  // namespace

std::optional<std::size_t> Network::weight_index(std::string_view layer) const {
  return weight_of_layer_[layer_position(layers_, layer)];
}

std::optional<std::size_t> Network::bias_index(std::string_view layer) const {
  return bias_of_layer_[layer_position(layers_, layer)];
}

Tensor& Network::weight(std::string_view layer) {
  auto idx = weight_index(layer);
  if (!idx) throw InputError("layer '" + std::string(layer) + "' has no weights");
  return params_[*idx].value;
}

const Tensor& Network::weight(std::string_view layer) const {
  return const_cast<Network*>(this)->weight(layer);
}

const LayerSpec& Network::layer(std::string_view name) const { return layers_[layer_position(layers_, name)]; }

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

std::size_t Network::weight_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.is_weight ? p.value.numel() : 0;
  return n;
}

Network build_lenet5(std::uint64_t seed) {
  Network net("lenet5",
              {LayerSpec::conv("conv1", 1, 20, 5), LayerSpec::relu("relu1"), LayerSpec::maxpool("pool1", 2, 2),
               LayerSpec::conv("conv2", 20, 50, 5), LayerSpec::relu("relu2"), LayerSpec::maxpool("pool2", 2, 2),
               LayerSpec::flatten("flatten"), LayerSpec::dense("fc1", 800, 500), LayerSpec::relu("relu3"),
               LayerSpec::dense("fc2", 500, 10)},
              {1, 28, 28}, 10);
  net.initialize(seed);
  return net;
}

Network build_mlp(std::span<const std::size_t> dims, std::uint64_t seed) {
  if (dims.size() < 2) throw InputError("build_mlp needs at least an input and an output dimension");
  std::vector<LayerSpec> layers;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    if (i > 0) layers.push_back(LayerSpec::relu("relu" + std::to_string(i)));
    layers.push_back(LayerSpec::dense("fc" + std::to_string(i + 1), dims[i], dims[i + 1]));
  }
  Network net("mlp", std::move(layers), {dims.front()}, dims.back());
  net.initialize(seed);
  return net;
}

}  // namespace forge
