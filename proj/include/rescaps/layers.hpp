#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "rescaps/autodiff.hpp"
#include "rescaps/routing.hpp"

namespace rescaps {

/// Layer widths. Defaults are the full-size network; `tiny()` is a scaled-down
/// variant with the same topology for gradient checking.
struct ArchSpec {
  Index image_size = 24;
  Index channels = 1;
  Index stem_kernel = 9;
  Index stem_channels = 256;
  Index primary_kernel = 9;
  Index primary_stride = 2;
  Index primary_channels = 256;
  Index primary_dim = 8;
  Index first_caps = 32;
  Index first_dim = 8;
  Index hidden_caps = 32;
  Index hidden_dim = 12;
  Index class_dim = 16;
  std::vector<Index> decoder_hidden = {512, 1024};

  Index stem_grid() const { return image_size - stem_kernel + 1; }
  Index primary_grid() const { return (stem_grid() - primary_kernel) / primary_stride + 1; }
  Index primary_caps() const {
    return primary_grid() * primary_grid() * primary_channels / primary_dim;
  }
  Index image_pixels() const { return image_size * image_size * channels; }

  void validate() const;

  /// 6x6 input, 8 primary capsules, 4 hidden capsules.
  static ArchSpec tiny(Index channels = 1);

  bool operator==(const ArchSpec&) const = default;
};

struct ModelConfig {
  std::string dataset = "mnist";
  Index num_classes = 10;
  int depth = 3;
  bool use_skip = false;
  RoutingAlgorithm routing = RoutingAlgorithm::rba;
  int routing_iterations = 2;
  std::uint64_t seed = 1;
  int batch_size = 128;
  int epochs = 30;
  double learning_rate = 1e-4;
  double recon_weight = 1e-5;
  double transform_init_std = 0.2;
  double bias_init = 0.1;
  LambdaSchedule em_lambda;
  ArchSpec arch;

  static constexpr int kMinDepth = 3;
  static constexpr int kMaxDepth = 16;

  /// Batch size actually used: at most 64 for networks deeper than 13 layers.
  int effective_batch_size() const { return depth > 13 ? std::min(batch_size, 64) : batch_size; }

  /// Throws UsageError on out-of-range settings.
  void validate() const;
};

/// Number of classes of a known dataset id (mnist, fashion, svhn, norb).
Index dataset_class_count(const std::string& dataset);
/// Image channels of a known dataset id.
Index dataset_channels(const std::string& dataset);

enum class LayerKind { conv_stem, primary, fc_capsule, class_capsule, residual_block, decoder };

std::string to_string(LayerKind kind);
LayerKind parse_layer_kind(const std::string& name);

struct LayerSpec {
  LayerKind kind = LayerKind::fc_capsule;
  std::string name;
  Index in_count = 0, in_dim = 0;
  Index out_count = 0, out_dim = 0;
  RoutingAlgorithm routing = RoutingAlgorithm::rba;
  int iterations = 0;
  Index kernel = 0, stride = 0;
  std::vector<LayerSpec> inner;  // residual block members

  bool routes() const {
    return kind == LayerKind::fc_capsule || kind == LayerKind::class_capsule;
  }
};

/// Layer list for a configuration: stem, primary, first capsule layer, dimension
/// adapter, hidden layers (paired into residual blocks when skips are on), class
/// capsules, decoder.
std::vector<LayerSpec> layer_plan(const ModelConfig& config);

/// Capsule layers that execute routing, counting those nested in residual blocks.
int routing_layer_count(const std::vector<LayerSpec>& layers);

/// Ordered, named parameter tensors.
template <typename S>
struct ParameterSet {
  std::vector<std::string> names;
  std::vector<Tensor<S>> values;

  void add(std::string name, Tensor<S> value) {
    names.push_back(std::move(name));
    values.push_back(std::move(value));
  }
  std::size_t size() const { return values.size(); }
  /// Index of `name`; throws UsageError when absent.
  std::size_t index(const std::string& name) const;
  const Tensor<S>& at(const std::string& name) const { return values[index(name)]; }
  Tensor<S>& at(const std::string& name) { return values[index(name)]; }
  Index total_elements() const;

  template <typename T>
  ParameterSet<T> cast() const {
    ParameterSet<T> out;
    for (std::size_t k = 0; k < size(); ++k) out.add(names[k], values[k].template cast<T>());
    return out;
  }
};

/// Parameters of one routed capsule layer, bound to a tape.
template <typename S>
struct CapsuleLayerParams {
  Var<S> weights;  // I x J x d_out x d_in
  Var<S> bias;     // J x d_out
  Var<S> beta_a;   // J (EM only)
  Var<S> beta_u;   // J (EM only)
};

// -- building blocks ---------------------------------------------------------

/// 9x9 stride-1 convolution followed by ReLU. image B x H x W x C.
template <typename S>
Var<S> conv_stem(const Var<S>& image, const Var<S>& kernel, const Var<S>& bias);

/// Strided convolution + ReLU, regrouped into capsules of `capsule_dim` and squashed.
template <typename S>
CapsuleTensor<S> primary_capsules(const Var<S>& features, const Var<S>& kernel,
                                  const Var<S>& bias, Index stride, Index capsule_dim);

/// Votes W_ij u_i for all child/parent pairs followed by the chosen router.
template <typename S>
CapsuleTensor<S> fc_capsule_layer(const CapsuleTensor<S>& input,
                                  const CapsuleLayerParams<S>& params, RoutingAlgorithm routing,
                                  int iterations, const LambdaSchedule& em_lambda = {});

/// Identity shortcut added after routing: poses of `inner` plus poses of `x`.
/// Vector-length routers recompute activations as the new pose norms; EM keeps
/// the inner layer's activations.
template <typename S>
CapsuleTensor<S> residual_add(const CapsuleTensor<S>& x, const CapsuleTensor<S>& inner,
                              RoutingAlgorithm routing);

template <typename S>
using CapsuleLayerFn = std::function<CapsuleTensor<S>(const CapsuleTensor<S>&)>;

/// out = layer_b(layer_a(x)) + x.
template <typename S>
CapsuleTensor<S> residual_block(const CapsuleTensor<S>& x, const CapsuleLayerFn<S>& layer_a,
                                const CapsuleLayerFn<S>& layer_b, RoutingAlgorithm routing);

/// Index of the largest activation per sample.
template <typename S>
std::vector<int> predict(const Tensor<S>& class_activations);

/// Dense weights of the reconstruction decoder, bound to a tape.
template <typename S>
struct DecoderParams {
  std::vector<Var<S>> weights;  // in x out
  std::vector<Var<S>> biases;
};

/// Zeroes every class capsule except `labels[b]` and decodes the flattened result
/// through ReLU hidden layers and a sigmoid output layer.
template <typename S>
Var<S> reconstruction_net(const Var<S>& class_poses, std::span<const int> labels,
                          const DecoderParams<S>& params);

// -- whole model -------------------------------------------------------------

template <typename S>
struct ForwardOutput {
  CapsuleTensor<S> class_caps;
  std::optional<Var<S>> reconstruction;
  /// Output of every routed layer (or residual block) in order, for inspection.
  std::vector<CapsuleTensor<S>> trunk;
};

template <typename S>
class Model {
 public:
  Model() = default;
  Model(ModelConfig config, std::vector<LayerSpec> layers, ParameterSet<S> params);

  const ModelConfig& config() const { return config_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const ParameterSet<S>& parameters() const { return params_; }
  ParameterSet<S>& parameters() { return params_; }

  /// Registers every parameter as a trainable leaf (or constant) on `tape`.
  std::vector<Var<S>> bind(Tape<S>& tape, bool trainable = true) const;

  /// Runs images (B x H x W x C) through the network. When `mask_labels` is set the
  /// decoder is evaluated on the capsules of those labels.
  ForwardOutput<S> forward(Tape<S>& tape, const std::vector<Var<S>>& bound,
                           const Tensor<S>& images,
                           std::optional<std::span<const int>> mask_labels) const;

  template <typename T>
  Model<T> cast() const {
    return Model<T>(config_, layers_, params_.template cast<T>());
  }

 private:
  CapsuleLayerParams<S> capsule_params(const std::vector<Var<S>>& bound,
                                       const std::string& layer) const;
  CapsuleTensor<S> run_capsule_layer(const LayerSpec& spec, const CapsuleTensor<S>& in,
                                     const std::vector<Var<S>>& bound) const;

  ModelConfig config_;
  std::vector<LayerSpec> layers_;
  ParameterSet<S> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Builds the layer plan and draws initial parameters from `config.seed`.
/// Transformation matrices ~ N(0, 0.2); routing biases 0.1; EM betas 0;
/// convolution and dense weights Glorot-uniform with zero bias.
template <typename S>
Model<S> build_model(const ModelConfig& config);

}  // namespace rescaps
