#include "rescaps/layers.hpp"

#include <cmath>
#include <random>

namespace rescaps {

void ArchSpec::validate() const {
  const auto positive = [](Index v, const char* what) {
    if (v < 1) throw UsageError(std::string("architecture: ") + what + " must be positive");
  };
  positive(image_size, "image size");
  positive(channels, "channels");
  positive(stem_kernel, "stem kernel");
  positive(stem_channels, "stem channels");
  positive(primary_kernel, "primary kernel");
  positive(primary_stride, "primary stride");
  positive(primary_channels, "primary channels");
  positive(primary_dim, "primary capsule dim");
  positive(first_caps, "first capsule count");
  positive(first_dim, "first capsule dim");
  positive(hidden_caps, "hidden capsule count");
  positive(hidden_dim, "hidden capsule dim");
  positive(class_dim, "class capsule dim");
  if (stem_kernel > image_size)
    throw UsageError("architecture: stem kernel larger than the input image");
  if (primary_kernel > stem_grid())
    throw UsageError("architecture: primary kernel larger than the stem feature map");
  if (primary_channels % primary_dim != 0)
    throw UsageError("architecture: primary channels not divisible by capsule dim");
}

ArchSpec ArchSpec::tiny(Index channels) {
  ArchSpec a;
  a.image_size = 6;
  a.channels = channels;
  a.stem_kernel = 3;
  a.stem_channels = 4;
  a.primary_kernel = 3;
  a.primary_stride = 1;
  a.primary_channels = 4;
  a.primary_dim = 2;
  a.first_caps = 4;
  a.first_dim = 2;
  a.hidden_caps = 4;
  a.hidden_dim = 3;
  a.class_dim = 4;
  a.decoder_hidden = {8, 8};
  return a;
}

Index dataset_class_count(const std::string& dataset) {
  if (dataset == "mnist" || dataset == "fashion" || dataset == "svhn") return 10;
  if (dataset == "norb") return 5;
  throw UsageError("unknown dataset '" + dataset + "' (expected mnist, fashion, svhn or norb)");
}

Index dataset_channels(const std::string& dataset) {
  dataset_class_count(dataset);
  return dataset == "svhn" ? 3 : 1;
}

void ModelConfig::validate() const {
  if (depth < kMinDepth || depth > kMaxDepth)
    throw UsageError("depth must be in [" + std::to_string(kMinDepth) + ", " +
                     std::to_string(kMaxDepth) + "], got " + std::to_string(depth));
  if (num_classes < 1) throw UsageError("class count must be positive");
  if (routing_iterations < 1) throw UsageError("routing iterations must be positive");
  if (batch_size < 1) throw UsageError("batch size must be positive");
  if (epochs < 0) throw UsageError("epochs must be non-negative");
  if (!(learning_rate > 0)) throw UsageError("learning rate must be positive");
  if (!(recon_weight >= 0)) throw UsageError("reconstruction weight must be non-negative");
  arch.validate();
  if (routing == RoutingAlgorithm::sda && (num_classes < 2 || arch.first_caps < 2 ||
                                           arch.hidden_caps < 2))
    throw UsageError("scaled-distance routing needs at least two parents in every layer");
}

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv_stem: return "conv-stem";
    case LayerKind::primary: return "primary";
    case LayerKind::fc_capsule: return "fc-capsule";
    case LayerKind::class_capsule: return "class-capsule";
    case LayerKind::residual_block: return "residual-block";
    case LayerKind::decoder: return "decoder";
  }
  return "?";
}

LayerKind parse_layer_kind(const std::string& name) {
  for (auto k : {LayerKind::conv_stem, LayerKind::primary, LayerKind::fc_capsule,
                 LayerKind::class_capsule, LayerKind::residual_block, LayerKind::decoder})
    if (to_string(k) == name) return k;
  throw UsageError("unknown layer kind '" + name + "'");
}

std::vector<LayerSpec> layer_plan(const ModelConfig& config) {
  config.validate();
  const ArchSpec& a = config.arch;
  const auto caps = [&](LayerKind kind, std::string name, Index in_n, Index in_d, Index out_n,
                        Index out_d) {
    LayerSpec s;
    s.kind = kind;
    s.name = std::move(name);
    s.in_count = in_n;
    s.in_dim = in_d;
    s.out_count = out_n;
    s.out_dim = out_d;
    s.routing = config.routing;
    s.iterations = config.routing_iterations;
    return s;
  };

  std::vector<LayerSpec> plan;
  {
    LayerSpec stem;
    stem.kind = LayerKind::conv_stem;
    stem.name = "stem";
    stem.in_count = a.image_size;
    stem.in_dim = a.channels;
    stem.out_count = a.stem_grid();
    stem.out_dim = a.stem_channels;
    stem.kernel = a.stem_kernel;
    stem.stride = 1;
    plan.push_back(stem);

    LayerSpec prim;
    prim.kind = LayerKind::primary;
    prim.name = "primary";
    prim.in_count = a.stem_grid();
    prim.in_dim = a.stem_channels;
    prim.out_count = a.primary_caps();
    prim.out_dim = a.primary_dim;
    prim.kernel = a.primary_kernel;
    prim.stride = a.primary_stride;
    plan.push_back(prim);
  }
  plan.push_back(caps(LayerKind::fc_capsule, "caps1", a.primary_caps(), a.primary_dim,
                      a.first_caps, a.first_dim));
  // Sub-network: dimension adapter plus (depth - 3) hidden layers.
  plan.push_back(caps(LayerKind::fc_capsule, "caps2", a.first_caps, a.first_dim, a.hidden_caps,
                      a.hidden_dim));
  const int hidden = config.depth - 3;
  int next = 3, block = 1;
  for (int k = 0; k < hidden;) {
    const auto hidden_layer = [&] {
      return caps(LayerKind::fc_capsule, "caps" + std::to_string(next++), a.hidden_caps,
                  a.hidden_dim, a.hidden_caps, a.hidden_dim);
    };
    if (config.use_skip && k + 1 < hidden) {
      LayerSpec res;
      res.kind = LayerKind::residual_block;
      res.name = "block" + std::to_string(block++);
      res.in_count = res.out_count = a.hidden_caps;
      res.in_dim = res.out_dim = a.hidden_dim;
      res.routing = config.routing;
      res.iterations = config.routing_iterations;
      res.inner.push_back(hidden_layer());
      res.inner.push_back(hidden_layer());
      plan.push_back(res);
      k += 2;
    } else {
      plan.push_back(hidden_layer());
      k += 1;
    }
  }
  plan.push_back(caps(LayerKind::class_capsule, "class", a.hidden_caps, a.hidden_dim,
                      config.num_classes, a.class_dim));
  LayerSpec dec;
  dec.kind = LayerKind::decoder;
  dec.name = "decoder";
  dec.in_count = config.num_classes;
  dec.in_dim = a.class_dim;
  dec.out_count = a.image_pixels();
  dec.out_dim = 1;
  plan.push_back(dec);
  return plan;
}

int routing_layer_count(const std::vector<LayerSpec>& layers) {
  int n = 0;
  for (const auto& l : layers) {
    if (l.routes()) ++n;
    if (l.kind == LayerKind::residual_block) n += routing_layer_count(l.inner);
  }
  return n;
}

template <typename S>
std::size_t ParameterSet<S>::index(const std::string& name) const {
  for (std::size_t k = 0; k < names.size(); ++k)
    if (names[k] == name) return k;
  throw UsageError("no parameter named '" + name + "'");
}

template <typename S>
Index ParameterSet<S>::total_elements() const {
  Index n = 0;
  for (const auto& v : values) n += v.size();
  return n;
}

// -- building blocks ---------------------------------------------------------

template <typename S>
Var<S> conv_stem(const Var<S>& image, const Var<S>& kernel, const Var<S>& bias) {
  return relu(conv2d(image, kernel, bias, 1));
}

template <typename S>
CapsuleTensor<S> primary_capsules(const Var<S>& features, const Var<S>& kernel,
                                  const Var<S>& bias, Index stride, Index capsule_dim) {
  const Var<S> maps = relu(conv2d(features, kernel, bias, stride));
  const Index batch = maps.dim(0);
  const Index per_sample = maps.value().size() / std::max<Index>(batch, 1);
  if (capsule_dim < 1 || per_sample % capsule_dim != 0)
    throw DimensionError("primary capsule maps " + to_string(maps.shape()) +
                         " cannot be grouped into capsules of dim " +
                         std::to_string(capsule_dim));
  const Index count = per_sample / capsule_dim;
  const Var<S> poses = squash(reshape(maps, {batch, count, capsule_dim}), 2);
  return {poses, reshape(norm(poses, 2), {batch, count})};
}

template <typename S>
CapsuleTensor<S> fc_capsule_layer(const CapsuleTensor<S>& input,
                                  const CapsuleLayerParams<S>& params, RoutingAlgorithm routing,
                                  int iterations, const LambdaSchedule& em_lambda) {
  const Var<S> votes = capsule_votes(input.poses, params.weights);
  switch (routing) {
    case RoutingAlgorithm::rba: return rba_route(votes, params.bias, iterations);
    case RoutingAlgorithm::sda: return sda_route(input, votes, params.bias, iterations);
    case RoutingAlgorithm::em: {
      EmParams<S> em{params.beta_a, params.beta_u, params.bias, em_lambda};
      return em_route(input, votes, em, iterations);
    }
  }
  throw UsageError("unknown routing algorithm");
}

template <typename S>
CapsuleTensor<S> residual_add(const CapsuleTensor<S>& x, const CapsuleTensor<S>& inner,
                              RoutingAlgorithm routing) {
  if (x.poses.shape() != inner.poses.shape())
    throw DimensionError("residual endpoints differ: " + to_string(x.poses.shape()) + " vs " +
                         to_string(inner.poses.shape()));
  const Var<S> poses = inner.poses + x.poses;
  if (routing == RoutingAlgorithm::em) return {poses, inner.activations};
  return {poses, reshape(norm(poses, 2), {poses.dim(0), poses.dim(1)})};
}

template <typename S>
CapsuleTensor<S> residual_block(const CapsuleTensor<S>& x, const CapsuleLayerFn<S>& layer_a,
                                const CapsuleLayerFn<S>& layer_b, RoutingAlgorithm routing) {
  return residual_add(x, layer_b(layer_a(x)), routing);
}

template <typename S>
std::vector<int> predict(const Tensor<S>& class_activations) {
  if (class_activations.rank() != 2)
    throw DimensionError("class activations must be B x K, got " +
                         to_string(class_activations.shape()));
  const Index batch = class_activations.dim(0), classes = class_activations.dim(1);
  std::vector<int> out(static_cast<std::size_t>(batch));
  for (Index b = 0; b < batch; ++b) {
    Index best = 0;
    for (Index k = 1; k < classes; ++k)
      if (class_activations(b, k) > class_activations(b, best)) best = k;
    out[static_cast<std::size_t>(b)] = static_cast<int>(best);
  }
  return out;
}

template <typename S>
Var<S> reconstruction_net(const Var<S>& class_poses, std::span<const int> labels,
                          const DecoderParams<S>& params) {
  if (class_poses.rank() != 3) throw DimensionError("class poses must be B x K x d");
  const Index batch = class_poses.dim(0), classes = class_poses.dim(1), dim = class_poses.dim(2);
  if (static_cast<Index>(labels.size()) != batch)
    throw DimensionError("reconstruction mask needs one label per sample");
  if (params.weights.empty() || params.weights.size() != params.biases.size())
    throw UsageError("decoder needs matching weight and bias lists");
  Tensor<S> mask({batch, classes, 1});
  for (Index b = 0; b < batch; ++b) {
    const int label = labels[static_cast<std::size_t>(b)];
    if (label < 0 || label >= classes)
      throw UsageError("mask label " + std::to_string(label) + " out of range [0, " +
                       std::to_string(classes) + ")");
    mask(b, label, 0) = S(1);
  }
  Var<S> h = reshape(class_poses * class_poses.tape().constant(std::move(mask)),
                     {batch, classes * dim});
  for (std::size_t k = 0; k < params.weights.size(); ++k) {
    h = matmul(h, params.weights[k]) + params.biases[k];
    h = k + 1 < params.weights.size() ? relu(h) : sigmoid(h);
  }
  return h;
}

// -- whole model -------------------------------------------------------------

template <typename S>
Model<S>::Model(ModelConfig config, std::vector<LayerSpec> layers, ParameterSet<S> params)
    : config_(std::move(config)), layers_(std::move(layers)), params_(std::move(params)) {
  for (std::size_t k = 0; k < params_.size(); ++k) index_[params_.names[k]] = k;
}

template <typename S>
std::vector<Var<S>> Model<S>::bind(Tape<S>& tape, bool trainable) const {
  std::vector<Var<S>> out;
  out.reserve(params_.size());
  for (const auto& v : params_.values) out.push_back(trainable ? tape.leaf(v) : tape.constant(v));
  return out;
}

template <typename S>
CapsuleLayerParams<S> Model<S>::capsule_params(const std::vector<Var<S>>& bound,
                                               const std::string& layer) const {
  const auto get = [&](const std::string& suffix) -> Var<S> {
    auto it = index_.find(layer + "." + suffix);
    if (it == index_.end()) return {};
    return bound.at(it->second);
  };
  CapsuleLayerParams<S> p{get("weights"), get("bias"), get("beta_a"), get("beta_u")};
  if (!p.weights.valid() || !p.bias.valid())
    throw UsageError("missing parameters for capsule layer " + layer);
  return p;
}

template <typename S>
CapsuleTensor<S> Model<S>::run_capsule_layer(const LayerSpec& spec, const CapsuleTensor<S>& in,
                                             const std::vector<Var<S>>& bound) const {
  return fc_capsule_layer(in, capsule_params(bound, spec.name), spec.routing, spec.iterations,
                          config_.em_lambda);
}

template <typename S>
ForwardOutput<S> Model<S>::forward(Tape<S>& tape, const std::vector<Var<S>>& bound,
                                   const Tensor<S>& images,
                                   std::optional<std::span<const int>> mask_labels) const {
  if (bound.size() != params_.size())
    throw UsageError("forward(): bound parameter list does not match the model");
  const ArchSpec& a = config_.arch;
  const Shape want{images.shape().empty() ? 0 : images.dim(0), a.image_size, a.image_size,
                   a.channels};
  if (images.shape() != want)
    throw DimensionError("model expects images " + to_string(want) + ", got " +
                         to_string(images.shape()));
  const auto p = [&](const std::string& name) { return bound.at(index_.at(name)); };

  ForwardOutput<S> out;
  CapsuleTensor<S> caps;
  for (const LayerSpec& spec : layers_) {
    switch (spec.kind) {
      case LayerKind::conv_stem:
        break;
      case LayerKind::primary: {
        const Var<S> features =
            conv_stem(tape.constant(images), p("stem.kernel"), p("stem.bias"));
        caps = primary_capsules(features, p("primary.kernel"), p("primary.bias"), spec.stride,
                                spec.out_dim);
        break;
      }
      case LayerKind::fc_capsule:
      case LayerKind::class_capsule:
        caps = run_capsule_layer(spec, caps, bound);
        out.trunk.push_back(caps);
        break;
      case LayerKind::residual_block: {
        const auto& inner = spec.inner;
        CapsuleLayerFn<S> first = [&](const CapsuleTensor<S>& x) {
          return run_capsule_layer(inner.at(0), x, bound);
        };
        CapsuleLayerFn<S> second = [&](const CapsuleTensor<S>& x) {
          return run_capsule_layer(inner.at(1), x, bound);
        };
        caps = residual_block(caps, first, second, spec.routing);
        out.trunk.push_back(caps);
        break;
      }
      case LayerKind::decoder:
        out.class_caps = caps;
        if (mask_labels) {
          DecoderParams<S> dp;
          for (std::size_t k = 0; k <= a.decoder_hidden.size(); ++k) {
            const std::string base = "decoder.dense" + std::to_string(k + 1);
            dp.weights.push_back(p(base + ".weights"));
            dp.biases.push_back(p(base + ".bias"));
          }
          out.reconstruction = reconstruction_net(caps.poses, *mask_labels, dp);
        }
        break;
    }
  }
  return out;
}

namespace {

/// Draws initial parameter values in double precision so every scalar type
/// starts from identical numbers.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor<double> normal(Shape shape, double stddev) {
    Tensor<double> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (Index k = 0; k < t.size(); ++k) t[k] = dist(rng_);
    return t;
  }

  Tensor<double> glorot(Shape shape, Index fan_in, Index fan_out) {
    Tensor<double> t(std::move(shape));
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Index k = 0; k < t.size(); ++k) t[k] = dist(rng_);
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

void init_capsule_layer(const LayerSpec& spec, const ModelConfig& config, Initializer& init,
                        ParameterSet<double>& params) {
  params.add(spec.name + ".weights",
             init.normal({spec.in_count, spec.out_count, spec.out_dim, spec.in_dim},
                         config.transform_init_std));
  params.add(spec.name + ".bias", Tensor<double>({spec.out_count, spec.out_dim},
                                                 config.bias_init));
  if (spec.routing == RoutingAlgorithm::em) {
    params.add(spec.name + ".beta_a", Tensor<double>({spec.out_count}));
    params.add(spec.name + ".beta_u", Tensor<double>({spec.out_count}));
  }
}

}  // namespace

template <typename S>
Model<S> build_model(const ModelConfig& config) {
  std::vector<LayerSpec> plan = layer_plan(config);
  const ArchSpec& a = config.arch;
  Initializer init(config.seed);
  ParameterSet<double> params;
  for (const LayerSpec& spec : plan) {
    switch (spec.kind) {
      case LayerKind::conv_stem:
      case LayerKind::primary: {
        const Index k = spec.kernel, cin = spec.in_dim;
        const Index cout = spec.kind == LayerKind::conv_stem ? a.stem_channels
                                                             : a.primary_channels;
        params.add(spec.name + ".kernel", init.glorot({k, k, cin, cout}, k * k * cin, k * k * cout));
        params.add(spec.name + ".bias", Tensor<double>({cout}));
        break;
      }
      case LayerKind::fc_capsule:
      case LayerKind::class_capsule:
        init_capsule_layer(spec, config, init, params);
        break;
      case LayerKind::residual_block:
        for (const LayerSpec& inner : spec.inner) init_capsule_layer(inner, config, init, params);
        break;
      case LayerKind::decoder: {
        std::vector<Index> widths{spec.in_count * spec.in_dim};
        widths.insert(widths.end(), a.decoder_hidden.begin(), a.decoder_hidden.end());
        widths.push_back(spec.out_count);
        for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
          const std::string base = "decoder.dense" + std::to_string(k + 1);
          params.add(base + ".weights",
                     init.glorot({widths[k], widths[k + 1]}, widths[k], widths[k + 1]));
          params.add(base + ".bias", Tensor<double>({widths[k + 1]}));
        }
        break;
      }
    }
  }
  return Model<S>(config, std::move(plan), params.template cast<S>());
}

#define RESCAPS_INSTANTIATE(S)                                                                 \
  template struct ParameterSet<S>;                                                             \
  template class Model<S>;                                                                     \
  template Model<S> build_model<S>(const ModelConfig&);                                        \
  template Var<S> conv_stem(const Var<S>&, const Var<S>&, const Var<S>&);                      \
  template CapsuleTensor<S> primary_capsules(const Var<S>&, const Var<S>&, const Var<S>&,      \
                                             Index, Index);                                    \
  template CapsuleTensor<S> fc_capsule_layer(const CapsuleTensor<S>&,                          \
                                             const CapsuleLayerParams<S>&, RoutingAlgorithm,   \
                                             int, const LambdaSchedule&);                      \
  template CapsuleTensor<S> residual_add(const CapsuleTensor<S>&, const CapsuleTensor<S>&,     \
                                         RoutingAlgorithm);                                    \
  template CapsuleTensor<S> residual_block(const CapsuleTensor<S>&, const CapsuleLayerFn<S>&,  \
                                           const CapsuleLayerFn<S>&, RoutingAlgorithm);        \
  template std::vector<int> predict(const Tensor<S>&);                                         \
  template Var<S> reconstruction_net(const Var<S>&, std::span<const int>,                      \
                                     const DecoderParams<S>&);

RESCAPS_INSTANTIATE(float)
RESCAPS_INSTANTIATE(double)

#undef RESCAPS_INSTANTIATE

}  // namespace rescaps
