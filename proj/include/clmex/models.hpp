#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "clmex/ops.hpp"
#include "clmex/rng.hpp"

namespace clmex {

class ModelConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Stack of (conv, relu) blocks, global average pool, dense to the embedding.
struct EncoderConfig {
  std::vector<std::size_t> conv_channels{16, 32, 64};
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t padding = 1;
  std::size_t embedding_dim = 64;
  std::size_t input_channels = 3;
  std::size_t image_size = 32;

  bool operator==(const EncoderConfig&) const = default;
};

/// dense -> relu -> dense -> row normalisation. hidden_dim 0 means embedding_dim.
struct ProjectionConfig {
  std::size_t hidden_dim = 0;
  std::size_t output_dim = 32;

  bool operator==(const ProjectionConfig&) const = default;
};

struct ModelConfig {
  EncoderConfig encoder;
  ProjectionConfig projection;
  std::size_t num_classes = 0;  // 0: no classifier head yet

  std::size_t hidden_dim() const { return projection.hidden_dim ? projection.hidden_dim : encoder.embedding_dim; }
  bool operator==(const ModelConfig&) const = default;
};

inline void validate(const ModelConfig& cfg) {
  const auto& e = cfg.encoder;
  if (e.conv_channels.empty()) throw ModelConfigError("encoder needs at least one conv block");
  for (auto c : e.conv_channels)
    if (c == 0) throw ModelConfigError("conv block with zero channels");
  if (e.kernel == 0 || e.stride == 0) throw ModelConfigError("kernel and stride must be positive");
  if (e.input_channels == 0 || e.image_size == 0) throw ModelConfigError("input shape must be non-empty");
  if (e.embedding_dim == 0 || cfg.projection.output_dim == 0) throw ModelConfigError("zero-width embedding");
  if (e.embedding_dim < cfg.projection.output_dim) {
    throw ModelConfigError("embedding_dim (" + std::to_string(e.embedding_dim) + ") must be >= projection output_dim (" +
                           std::to_string(cfg.projection.output_dim) + ")");
  }
  std::size_t side = e.image_size;
  for (std::size_t i = 0; i < e.conv_channels.size(); ++i) {
    if (side + 2 * e.padding < e.kernel) {
      throw ModelConfigError("conv block " + std::to_string(i) + " sees a " + std::to_string(side) +
                             "px map, smaller than the kernel");
    }
    side = (side + 2 * e.padding - e.kernel) / e.stride + 1;
  }
}

/// Closed-form parameter count, used to cross-check the wiring.
inline std::size_t expected_parameter_count(const ModelConfig& cfg) {
  const auto& e = cfg.encoder;
  std::size_t total = 0, in = e.input_channels;
  for (auto out : e.conv_channels) {
    total += out * in * e.kernel * e.kernel + out;
    in = out;
  }
  total += e.embedding_dim * in + e.embedding_dim;
  const std::size_t h = cfg.hidden_dim();
  total += h * e.embedding_dim + h + cfg.projection.output_dim * h + cfg.projection.output_dim;
  if (cfg.num_classes) total += cfg.num_classes * e.embedding_dim + cfg.num_classes;
  return total;
}

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

namespace detail {

/// Kaiming-uniform with fan-in: U(-b, b), b = sqrt(6 / fan_in).
inline Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = uniform(rng, -bound, bound);
  return Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace detail

struct Encoder {
  EncoderConfig config;
  std::vector<Tensor> conv_weights, conv_biases;
  Tensor fc_weight, fc_bias;

  /// images [B, C, S, S] -> R [B, embedding_dim]
  Tensor operator()(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != config.input_channels || images.dim(2) != config.image_size ||
        images.dim(3) != config.image_size) {
      throw ShapeError("encode", images.shape(),
                       Shape{0, config.input_channels, config.image_size, config.image_size});
    }
    // Pixels enter the network centred: [0, 1] -> [-1, 1].
    Tensor h = affine(images, 2.0, -1.0);
    for (std::size_t i = 0; i < conv_weights.size(); ++i) {
      h = relu(conv2d(h, conv_weights[i], conv_biases[i], {config.stride, config.padding}));
    }
    return dense(global_average_pool(h), fc_weight, fc_bias);
  }

  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < conv_weights.size(); ++i) {
      out.push_back({"encoder.conv" + std::to_string(i) + ".weight", conv_weights[i]});
      out.push_back({"encoder.conv" + std::to_string(i) + ".bias", conv_biases[i]});
    }
    out.push_back({"encoder.fc.weight", fc_weight});
    out.push_back({"encoder.fc.bias", fc_bias});
    return out;
  }
};

struct ProjectionHead {
  Tensor w1, b1, w2, b2;

  /// R [B, E] -> Z [B, P], unit rows.
  Tensor operator()(const Tensor& r) const { return l2_normalize_rows(dense(relu(dense(r, w1, b1)), w2, b2)); }

  std::vector<NamedTensor> parameters() const {
    return {{"projection.fc1.weight", w1}, {"projection.fc1.bias", b1}, {"projection.fc2.weight", w2},
            {"projection.fc2.bias", b2}};
  }
};

/// Linear classifier over R. Inputs are first standardised per feature with
/// frozen statistics (identity until fit_input_statistics is called); the
/// function class is unchanged, only the conditioning of training improves.
struct LinearHead {
  Tensor weight, bias;
  Tensor input_mean, input_scale;  // buffers: never trained

  Tensor operator()(const Tensor& r) const {
    const auto m = input_mean.values(), s = input_scale.values();
    return dense(standardize_columns(r, {m.begin(), m.end()}, {s.begin(), s.end()}), weight, bias);
  }

  /// Sets the buffers to the column mean and standard deviation of `r`;
  /// near-constant features keep scale 1.
  void fit_input_statistics(const Tensor& r) {
    const std::size_t n = r.dim(0), d = r.dim(1);
    auto mean = input_mean.mutable_values();
    auto scale = input_scale.mutable_values();
    for (std::size_t j = 0; j < d; ++j) {
      double mu = 0.0, var = 0.0;
      for (std::size_t i = 0; i < n; ++i) mu += r[i * d + j];
      mu /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) var += (r[i * d + j] - mu) * (r[i * d + j] - mu);
      const double sd = std::sqrt(var / static_cast<double>(n));
      mean[j] = mu;
      scale[j] = sd > 1e-8 ? sd : 1.0;
    }
  }

  std::size_t num_classes() const { return weight.dim(0); }
  std::vector<NamedTensor> parameters() const { return {{"classifier.weight", weight}, {"classifier.bias", bias}}; }
  std::vector<NamedTensor> buffers() const {
    return {{"classifier.input_mean", input_mean}, {"classifier.input_scale", input_scale}};
  }
};

inline Encoder make_encoder(const EncoderConfig& cfg, Rng& rng) {
  Encoder e{cfg, {}, {}, {}, {}};
  std::size_t in = cfg.input_channels;
  for (auto out : cfg.conv_channels) {
    e.conv_weights.push_back(detail::kaiming_uniform({out, in, cfg.kernel, cfg.kernel}, in * cfg.kernel * cfg.kernel, rng));
    e.conv_biases.push_back(Tensor::zeros({out}, true));
    in = out;
  }
  e.fc_weight = detail::kaiming_uniform({cfg.embedding_dim, in}, in, rng);
  e.fc_bias = Tensor::zeros({cfg.embedding_dim}, true);
  return e;
}

inline ProjectionHead make_projection(std::size_t embedding_dim, std::size_t hidden, std::size_t output, Rng& rng) {
  return {detail::kaiming_uniform({hidden, embedding_dim}, embedding_dim, rng), Tensor::zeros({hidden}, true),
          detail::kaiming_uniform({output, hidden}, hidden, rng), Tensor::zeros({output}, true)};
}

inline LinearHead make_linear_head(std::size_t embedding_dim, std::size_t classes, Rng& rng) {
  if (classes == 0) throw ModelConfigError("classifier needs at least one class");
  return {detail::kaiming_uniform({classes, embedding_dim}, embedding_dim, rng), Tensor::zeros({classes}, true),
          Tensor::zeros({embedding_dim}), Tensor::from({embedding_dim}, std::vector<double>(embedding_dim, 1.0))};
}

/// Encoder, projection head and (once attached) the downstream classifier.
struct Model {
  ModelConfig config;
  Encoder encoder;
  ProjectionHead projection;
  LinearHead classifier;  // undefined tensors until num_classes > 0

  bool has_classifier() const { return classifier.weight.defined(); }

  Tensor encode(const Tensor& images) const { return encoder(images); }
  Tensor project(const Tensor& r) const { return projection(r); }

  Tensor classify(const Tensor& r) const {
    if (!has_classifier()) throw ModelConfigError("model has no classifier head");
    return classifier(r);
  }

  /// Replaces the classifier with a fresh head over `classes` outputs.
  void attach_classifier(std::size_t classes, Rng& rng) {
    classifier = make_linear_head(config.encoder.embedding_dim, classes, rng);
    config.num_classes = classes;
  }

  void require_classes(std::size_t classes) const {
    if (!has_classifier() || classifier.num_classes() != classes) {
      throw ModelConfigError("classifier has " + std::to_string(has_classifier() ? classifier.num_classes() : 0) +
                             " classes, dataset vocabulary has " + std::to_string(classes));
    }
  }

  /// Every parameter in a fixed order: encoder, projection, classifier.
  std::vector<NamedTensor> parameters() const {
    auto out = encoder.parameters();
    for (auto& p : projection.parameters()) out.push_back(std::move(p));
    if (has_classifier())
      for (auto& p : classifier.parameters()) out.push_back(std::move(p));
    return out;
  }

  /// Non-trainable state saved alongside the parameters.
  std::vector<NamedTensor> buffers() const { return has_classifier() ? classifier.buffers() : std::vector<NamedTensor>{}; }

  /// Parameters followed by buffers: everything a checkpoint must hold.
  std::vector<NamedTensor> state() const {
    auto out = parameters();
    for (auto& b : buffers()) out.push_back(std::move(b));
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.size();
    return n;
  }

  /// Parameter handles of the encoder alone.
  std::vector<Tensor> encoder_tensors() const {
    std::vector<Tensor> out;
    for (const auto& p : encoder.parameters()) out.push_back(p.tensor);
    return out;
  }

  void set_encoder_trainable(bool on) {
    for (auto& p : encoder.parameters()) p.tensor.set_requires_grad(on);
  }
};

inline Model make_model(const ModelConfig& cfg, Rng& rng) {
  validate(cfg);
  Model m;
  m.config = cfg;
  m.encoder = make_encoder(cfg.encoder, rng);
  m.projection = make_projection(cfg.encoder.embedding_dim, cfg.hidden_dim(), cfg.projection.output_dim, rng);
  if (cfg.num_classes) m.attach_classifier(cfg.num_classes, rng);
  return m;
}

/// Row-wise argmax; ties resolve to the lowest class index.
inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<int> out(rows, 0);
  for (std::size_t i = 0; i < rows; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < cols; ++j)
      if (logits[i * cols + j] > logits[i * cols + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace clmex
