#include "cap/style.hpp"

#include <stdexcept>
#include <string>

#include "cap/ops.hpp"
#include "cap/parameters.hpp"

namespace cap {

namespace {

std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::AvgPool: return "avgpool";
  }
  return "?";
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::None: return "none";
    case Activation::Relu: return "relu";
    case Activation::Silu: return "silu";
  }
  return "?";
}

LayerKind layer_kind_from(const std::string& s) {
  if (s == "conv") return LayerKind::Conv;
  if (s == "maxpool") return LayerKind::MaxPool;
  if (s == "avgpool") return LayerKind::AvgPool;
  throw std::invalid_argument("unknown layer kind: " + s);
}

Activation activation_from(const std::string& s) {
  if (s == "none") return Activation::None;
  if (s == "relu") return Activation::Relu;
  if (s == "silu") return Activation::Silu;
  throw std::invalid_argument("unknown activation: " + s);
}

Var activate(const Var& x, Activation a) {
  switch (a) {
    case Activation::Relu: return ops::relu(x);
    case Activation::Silu: return ops::silu(x);
    case Activation::None: break;
  }
  return x;
}

void require_images(const std::vector<Var>& images, const char* what) {
  if (images.empty()) throw std::invalid_argument(std::string(what) + ": empty image set");
  for (const Var& im : images) {
    if (im.shape() != images.front().shape()) {
      throw std::invalid_argument(std::string(what) + ": images differ in shape");
    }
  }
}

}  // namespace

ExtractorConfig ExtractorConfig::vgg19_head() {
  ExtractorConfig c;
  c.layers = {
      {LayerKind::Conv, 64}, {LayerKind::Conv, 64}, {LayerKind::MaxPool},
      {LayerKind::Conv, 128}, {LayerKind::Conv, 128}, {LayerKind::MaxPool},
      {LayerKind::Conv, 256},
  };
  c.taps = {0, 1, 2, 3, 4};
  return c;
}

int ExtractorConfig::conv_count() const {
  int n = 0;
  for (const auto& l : layers) n += l.kind == LayerKind::Conv;
  return n;
}

void ExtractorConfig::validate() const {
  if (taps.empty()) throw std::invalid_argument("extractor: tap list is empty");
  const int convs = conv_count();
  int prev = -1;
  for (int t : taps) {
    if (t < 0 || t >= convs) throw std::invalid_argument("extractor: tap " + std::to_string(t) + " out of range");
    if (t <= prev) throw std::invalid_argument("extractor: taps must be strictly increasing");
    prev = t;
  }
  if (static_cast<int>(channel_mean.size()) != in_channels || static_cast<int>(channel_std.size()) != in_channels) {
    throw std::invalid_argument("extractor: standardisation constants must match input channels");
  }
  for (double s : channel_std) {
    if (!(s > 0.0)) throw std::invalid_argument("extractor: channel_std must be positive");
  }
  for (const auto& l : layers) {
    if (l.kind == LayerKind::Conv && (l.out_channels < 1 || l.kernel < 1 || l.kernel % 2 == 0)) {
      throw std::invalid_argument("extractor: conv layers need positive channels and an odd kernel");
    }
  }
}

nlohmann::json ExtractorConfig::to_json() const {
  nlohmann::json layer_list = nlohmann::json::array();
  for (const auto& l : layers) {
    nlohmann::json j{{"kind", to_string(l.kind)}};
    if (l.kind == LayerKind::Conv) {
      j["out_channels"] = l.out_channels;
      j["kernel"] = l.kernel;
      j["activation"] = to_string(l.activation);
      j["bias"] = l.bias;
    }
    layer_list.push_back(std::move(j));
  }
  return {{"in_channels", in_channels}, {"layers", layer_list},       {"taps", taps},
          {"channel_mean", channel_mean}, {"channel_std", channel_std}, {"init_seed", init_seed}};
}

ExtractorConfig ExtractorConfig::from_json(const nlohmann::json& j) {
  ExtractorConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.layers.clear();
  for (const auto& l : j.at("layers")) {
    LayerSpec s;
    s.kind = layer_kind_from(l.at("kind").get<std::string>());
    if (s.kind == LayerKind::Conv) {
      s.out_channels = l.at("out_channels").get<int>();
      s.kernel = l.at("kernel").get<int>();
      s.activation = activation_from(l.at("activation").get<std::string>());
      s.bias = l.at("bias").get<bool>();
    }
    c.layers.push_back(s);
  }
  c.taps = j.at("taps").get<std::vector<int>>();
  c.channel_mean = j.at("channel_mean").get<std::vector<double>>();
  c.channel_std = j.at("channel_std").get<std::vector<double>>();
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  return c;
}

FeatureExtractor::FeatureExtractor(ExtractorConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng(config_.init_seed);
  int channels = config_.in_channels;
  for (const auto& l : config_.layers) {
    if (l.kind != LayerKind::Conv) continue;
    weights_.push_back(Var::constant(fan_in_uniform({l.out_channels, channels, l.kernel, l.kernel}, rng)));
    biases_.push_back(l.bias ? Var::constant(rng.uniform_tensor({l.out_channels}, -0.1, 0.1)) : Var());
    channels = l.out_channels;
  }
}

FeatureExtractor FeatureExtractor::from_checkpoint(const Checkpoint& checkpoint) {
  if (checkpoint.kind != "extractor") {
    throw std::runtime_error("checkpoint kind '" + checkpoint.kind + "' is not an extractor");
  }
  FeatureExtractor fx(ExtractorConfig::from_json(checkpoint.meta.at("extractor_config")));
  for (std::size_t i = 0; i < fx.weights_.size(); ++i) {
    const Tensor& w = checkpoint.tensor("conv" + std::to_string(i) + ".w");
    require_same_shape(fx.weights_[i].value(), w, "extractor weight");
    fx.weights_[i] = Var::constant(w);
    if (fx.biases_[i].defined()) {
      const Tensor& b = checkpoint.tensor("conv" + std::to_string(i) + ".b");
      require_same_shape(fx.biases_[i].value(), b, "extractor bias");
      fx.biases_[i] = Var::constant(b);
    }
  }
  return fx;
}

Checkpoint FeatureExtractor::to_checkpoint() const {
  Checkpoint ck;
  ck.kind = "extractor";
  ck.meta["extractor_config"] = config_.to_json();
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    ck.tensors.emplace_back("conv" + std::to_string(i) + ".w", weights_[i].value());
    if (biases_[i].defined()) ck.tensors.emplace_back("conv" + std::to_string(i) + ".b", biases_[i].value());
  }
  return ck;
}

std::vector<Var> FeatureExtractor::extract(const Var& image) const {
  const Shape& s = image.shape();
  if (s.size() != 3 || s[0] != config_.in_channels) {
    throw std::invalid_argument("extractor: expected {" + std::to_string(config_.in_channels) +
                                ", H, W} input, got " + shape_str(s));
  }
  if (!image.value().all_finite()) throw std::invalid_argument("extractor: non-finite image");

  // (x - mean) / std as a scale plus a constant offset, per channel.
  Tensor offset(s);
  Tensor factor(s);
  const std::size_t plane = static_cast<std::size_t>(s[1]) * s[2];
  for (int c = 0; c < s[0]; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      factor[c * plane + i] = 1.0 / config_.channel_std[c];
      offset[c * plane + i] = -config_.channel_mean[c] / config_.channel_std[c];
    }
  }
  Var h = ops::add_constant(ops::mul(image, Var::constant(std::move(factor))), offset);

  std::vector<Var> taps;
  taps.reserve(config_.taps.size());
  std::size_t next_tap = 0;
  int conv_index = 0;
  for (const auto& l : config_.layers) {
    switch (l.kind) {
      case LayerKind::MaxPool: h = ops::max_pool2(h); break;
      case LayerKind::AvgPool: h = ops::avg_pool2(h); break;
      case LayerKind::Conv: {
        h = activate(ops::conv2d(h, weights_[conv_index], biases_[conv_index], l.kernel / 2), l.activation);
        if (next_tap < config_.taps.size() && config_.taps[next_tap] == conv_index) {
          const Shape& hs = h.shape();
          taps.push_back(ops::reshape(h, {hs[0], hs[1] * hs[2]}));
          ++next_tap;
        }
        ++conv_index;
        break;
      }
    }
    if (next_tap == config_.taps.size()) break;
  }
  return taps;
}

std::vector<Tensor> FeatureExtractor::extract(const Tensor& image) const {
  NoGradGuard no_grad;
  std::vector<Tensor> out;
  for (const Var& v : extract(Var::constant(image))) out.push_back(v.value());
  return out;
}

Var gram_matrix(const Var& features, GramNorm norm) {
  if (features.value().rank() != 2) throw std::invalid_argument("gram: features must be {C, HW}");
  const double divisor = norm == GramNorm::Raw ? 1.0 : static_cast<double>(features.value().size());
  return ops::gram(features, divisor);
}

Tensor gram_matrix(const Tensor& features, GramNorm norm) {
  NoGradGuard no_grad;
  return gram_matrix(Var::constant(features), norm).value();
}

Var style_similarity(const Var& g_i, const Var& g_j) {
  require_same_shape(g_i.value(), g_j.value(), "style_similarity");
  return ops::sum_squares(ops::sub(g_i, g_j));
}

double style_similarity(const Tensor& g_i, const Tensor& g_j) {
  require_same_shape(g_i, g_j, "style_similarity");
  double acc = 0.0;
  for (std::size_t k = 0; k < g_i.size(); ++k) {
    const double d = g_i[k] - g_j[k];
    acc += d * d;
  }
  return acc;
}

Var mean_gram(const std::vector<Var>& grams) {
  if (grams.empty()) throw std::invalid_argument("mean_gram: empty list");
  return ops::mean_of(grams);
}

Tensor mean_gram(const std::vector<Tensor>& grams) {
  if (grams.empty()) throw std::invalid_argument("mean_gram: empty list");
  Tensor acc = grams.front();
  for (std::size_t i = 1; i < grams.size(); ++i) acc += grams[i];
  return acc * (1.0 / static_cast<double>(grams.size()));
}

GramStack compute_gram_stack(const ImageList& images, const FeatureExtractor& extractor, GramNorm norm) {
  if (images.empty()) throw std::invalid_argument("gram stack: empty image set");
  GramStack stack;
  stack.norm = norm;
  for (const Tensor& im : images) {
    std::vector<Tensor> per_tap;
    for (const Tensor& f : extractor.extract(im)) per_tap.push_back(gram_matrix(f, norm));
    stack.grams.push_back(std::move(per_tap));
  }
  for (std::size_t l = 0; l < extractor.tap_count(); ++l) {
    std::vector<Tensor> layer;
    for (const auto& per_image : stack.grams) layer.push_back(per_image[l]);
    stack.mean_grams.push_back(mean_gram(layer));
  }
  return stack;
}

Var consistency_loss(const std::vector<Var>& images, const FeatureExtractor& extractor, GramNorm norm) {
  require_images(images, "consistency_loss");
  const std::size_t n = images.size();
  std::vector<std::vector<Var>> grams(extractor.tap_count());
  for (const Var& im : images) {
    const auto feats = extractor.extract(im);
    for (std::size_t l = 0; l < feats.size(); ++l) grams[l].push_back(gram_matrix(feats[l], norm));
  }
  std::vector<Var> terms;
  for (const auto& layer : grams) {
    const Var reference = mean_gram(layer);
    for (const Var& g : layer) terms.push_back(style_similarity(g, reference));
  }
  return ops::scale(ops::add_n(terms), 1.0 / static_cast<double>(n));
}

Var content_consistency_loss(const std::vector<Var>& images, const FeatureExtractor& extractor, int content_tap) {
  require_images(images, "content_consistency_loss");
  if (content_tap < 0 || content_tap >= static_cast<int>(extractor.tap_count())) {
    throw std::invalid_argument("content_consistency_loss: tap index out of range");
  }
  std::vector<Var> feats;
  for (const Var& im : images) feats.push_back(extractor.extract(im)[content_tap]);
  const Var reference = ops::mean_of(feats);
  std::vector<Var> terms;
  for (const Var& f : feats) terms.push_back(ops::sum_squares(ops::sub(f, reference)));
  return ops::scale(ops::add_n(terms), 1.0 / static_cast<double>(images.size()));
}

Var pairwise_consistency_loss(const std::vector<Var>& images, const FeatureExtractor& extractor, GramNorm norm) {
  require_images(images, "pairwise_consistency_loss");
  const std::size_t n = images.size();
  if (n < 2) return Var::constant(Tensor::scalar(0.0));
  std::vector<std::vector<Var>> grams;
  for (const Var& im : images) {
    std::vector<Var> per_tap;
    for (const Var& f : extractor.extract(im)) per_tap.push_back(gram_matrix(f, norm));
    grams.push_back(std::move(per_tap));
  }
  std::vector<Var> terms;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      for (std::size_t l = 0; l < grams[i].size(); ++l) terms.push_back(style_similarity(grams[i][l], grams[j][l]));
    }
  }
  return ops::scale(ops::add_n(terms), 2.0 / static_cast<double>(n * (n - 1)));
}

}  // namespace cap
