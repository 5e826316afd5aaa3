#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "forge/tensor.hpp"

namespace forge {

enum class LayerKind { conv, dense, relu, maxpool, flatten };

std::string_view to_string(LayerKind kind);
LayerKind parse_layer_kind(std::string_view s);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::string name;
  std::size_t in = 0;      // input channels (conv) or features (dense)
  std::size_t out = 0;     // filters (conv) or features (dense)
  std::size_t kernel = 0;  // conv kernel or pooling window
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool compressible = false;

  static LayerSpec conv(std::string name, std::size_t in, std::size_t out, std::size_t kernel,
                        std::size_t stride = 1, std::size_t padding = 0);
  static LayerSpec dense(std::string name, std::size_t in, std::size_t out);
  static LayerSpec relu(std::string name);
  static LayerSpec maxpool(std::string name, std::size_t window, std::size_t stride);
  static LayerSpec flatten(std::string name);

  bool has_parameters() const { return kind == LayerKind::conv || kind == LayerKind::dense; }
  bool operator==(const LayerSpec&) const = default;
};

struct Parameter {
  std::string name;  // "<layer>.weight" or "<layer>.bias"
  std::size_t layer = 0;
  bool is_weight = false;
  Tensor value;
};

class GradTape;

/// Feed-forward chain of layers plus their parameters.
class Network {
 public:
  Network(std::string model_name, std::vector<LayerSpec> layers, Shape input_shape, std::size_t classes);

  /// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases.
  void initialize(std::uint64_t seed);

  Tensor forward(const Tensor& x) const;
  Tensor forward(const Tensor& x, GradTape& tape) const;

  const std::string& model_name() const { return model_name_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const Shape& input_shape() const { return input_shape_; }
  std::size_t classes() const { return classes_; }
  std::uint64_t init_seed() const { return init_seed_; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  /// Names of compressible (conv/dense) layers in forward order.
  std::vector<std::string> compressible_layers() const;

  std::optional<std::size_t> weight_index(std::string_view layer) const;
  std::optional<std::size_t> bias_index(std::string_view layer) const;
  Tensor& weight(std::string_view layer);
  const Tensor& weight(std::string_view layer) const;
  const LayerSpec& layer(std::string_view name) const;

  std::size_t parameter_count() const;
  /// Entries in conv/dense weight tensors (biases excluded).
  std::size_t weight_count() const;

 private:
  friend class GradTape;

  std::string model_name_;
  std::vector<LayerSpec> layers_;
  Shape input_shape_;
  std::size_t classes_ = 0;
  std::uint64_t init_seed_ = 0;
  std::vector<Parameter> params_;
  std::vector<std::optional<std::size_t>> weight_of_layer_;
  std::vector<std::optional<std::size_t>> bias_of_layer_;
};

/// Records the activations of one forward pass and, after backward(),
/// holds one gradient per network parameter (same order, same shapes).
class GradTape {
 public:
  void backward(const Tensor& dlogits);

  std::vector<Tensor>& grads() { return grads_; }
  const std::vector<Tensor>& grads() const { return grads_; }
  Tensor& grad(std::size_t param) { return grads_.at(param); }

 private:
  friend class Network;
  struct Record {
    Tensor input;
    std::vector<std::uint32_t> argmax;
  };
  const Network* net_ = nullptr;
  std::vector<Record> records_;
  std::vector<Tensor> grads_;
};

/// Conv(20@5x5) -> relu -> pool -> conv(50@5x5) -> relu -> pool -> dense(500) -> relu -> dense(10).
Network build_lenet5(std::uint64_t seed = 0);

/// Dense/relu stack; dims = {in, hidden..., out}.
Network build_mlp(std::span<const std::size_t> dims, std::uint64_t seed = 0);

}  // namespace forge
