#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "cap/autograd.hpp"
#include "cap/checkpoint.hpp"

namespace cap {

enum class LayerKind { Conv, MaxPool, AvgPool };
enum class Activation { None, Relu, Silu };

struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  int out_channels = 0;  // conv only
  int kernel = 3;        // conv only
  Activation activation = Activation::Relu;
  bool bias = false;
};

struct ExtractorConfig {
  int in_channels = 3;
  std::vector<LayerSpec> layers;
  /// Indices into the conv layers (0 = first conv) whose activated output is tapped.
  std::vector<int> taps;
  /// Per-channel standardisation applied to [0, 1] inputs.
  std::vector<double> channel_mean{0.485, 0.456, 0.406};
  std::vector<double> channel_std{0.229, 0.224, 0.225};
  std::uint64_t init_seed = 19;

  /// First five convolutions of a VGG-19 (64, 64, pool, 128, 128, pool, 256), all tapped.
  static ExtractorConfig vgg19_head();
  int conv_count() const;
  void validate() const;
  nlohmann::json to_json() const;
  static ExtractorConfig from_json(const nlohmann::json& j);
};

/// Fixed convolutional feature extractor. Weights are set once (seeded random
/// init or loaded from a checkpoint) and never change afterwards.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(ExtractorConfig config = ExtractorConfig::vgg19_head());

  static FeatureExtractor from_checkpoint(const Checkpoint& checkpoint);
  Checkpoint to_checkpoint() const;

  /// Tapped activations flattened to {C_l, H_l * W_l}, in tap order.
  std::vector<Var> extract(const Var& image) const;
  std::vector<Tensor> extract(const Tensor& image) const;

  const ExtractorConfig& config() const { return config_; }
  std::size_t tap_count() const { return config_.taps.size(); }

 private:
  ExtractorConfig config_;
  std::vector<Var> weights_;  // per conv layer
  std::vector<Var> biases_;   // per conv layer; undefined when bias-free
};

enum class GramNorm {
  Raw,               // f f^T
  ChannelsPixels,    // f f^T / (C * H * W)
};

Var gram_matrix(const Var& features, GramNorm norm = GramNorm::ChannelsPixels);
Tensor gram_matrix(const Tensor& features, GramNorm norm = GramNorm::ChannelsPixels);

/// Squared Frobenius distance between two Gram matrices.
Var style_similarity(const Var& g_i, const Var& g_j);
double style_similarity(const Tensor& g_i, const Tensor& g_j);

Var mean_gram(const std::vector<Var>& grams);
Tensor mean_gram(const std::vector<Tensor>& grams);

struct GramStack {
  std::vector<std::vector<Tensor>> grams;  // [image][tap]
  std::vector<Tensor> mean_grams;          // [tap]
  GramNorm norm = GramNorm::ChannelsPixels;
};

GramStack compute_gram_stack(const ImageList& images, const FeatureExtractor& extractor,
                             GramNorm norm = GramNorm::ChannelsPixels);

/// (1/N) sum_i ||G(x_i) - mean_j G(x_j)||^2, summed with equal weight over taps.
/// The mean is differentiated through.
Var consistency_loss(const std::vector<Var>& images, const FeatureExtractor& extractor,
                     GramNorm norm = GramNorm::ChannelsPixels);

/// Same structure on raw features of a single tap (index into the tap list).
Var content_consistency_loss(const std::vector<Var>& images, const FeatureExtractor& extractor, int content_tap);

/// Mean pairwise style_similarity over i < j, summed over taps. Not used by
/// the attack by default.
Var pairwise_consistency_loss(const std::vector<Var>& images, const FeatureExtractor& extractor,
                              GramNorm norm = GramNorm::ChannelsPixels);

}  // namespace cap
