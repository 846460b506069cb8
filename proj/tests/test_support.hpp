#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "cap/autograd.hpp"
#include "cap/random.hpp"

namespace cap::testing {

/// Central differences of a scalar function of one tensor.
inline Tensor finite_difference(const std::function<double(const Tensor&)>& f, Tensor x, double step) {
  Tensor g = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double up = f(x);
    x[i] = orig - step;
    const double down = f(x);
    x[i] = orig;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

/// ||a - b|| / max(||b||, floor).
inline double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-12) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), floor);
}

/// Builds the graph with `build` from a leaf at `x`, compares the autograd
/// gradient with central differences.
inline double gradient_error(const std::function<Var(const Var&)>& build, const Tensor& x, double step = 1e-4) {
  Var leaf(x, true);
  const Tensor analytic = gradient(build(leaf), leaf);
  const Tensor numeric = finite_difference(
      [&](const Tensor& p) {
        NoGradGuard ng;
        return build(Var::constant(p)).value().item();
      },
      x, step);
  return relative_error(analytic, numeric);
}

inline Tensor random_image(Rng& rng, int c, int h, int w, double lo = 0.0, double hi = 1.0) {
  return rng.uniform_tensor({c, h, w}, lo, hi);
}

}  // namespace cap::testing

#include "cap/diffusion.hpp"
#include "cap/style.hpp"

namespace cap::testing {

/// Small enough for finite differences and short training loops.
inline DenoiserConfig tiny_denoiser(std::uint64_t seed = 7) {
  DenoiserConfig c;
  c.level_channels = {8, 8};
  c.mid_channels = 8;
  c.time_dim = 8;
  c.embed_dim = 16;
  c.concept_dim = 4;
  c.init_seed = seed;
  return c;
}

/// One 1x1 conv, unit weight, no activation, no standardisation: features are the pixels.
inline FeatureExtractor identity_extractor(int channels = 1) {
  ExtractorConfig c;
  c.in_channels = channels;
  c.layers = {LayerSpec{LayerKind::Conv, channels, 1, Activation::None, false}};
  c.taps = {0};
  c.channel_mean.assign(channels, 0.0);
  c.channel_std.assign(channels, 1.0);
  FeatureExtractor seeded(c);
  Checkpoint ck = seeded.to_checkpoint();
  Tensor w({channels, channels, 1, 1});
  for (int i = 0; i < channels; ++i) w[i * channels + i] = 1.0;
  ck.tensors[0].second = w;
  return FeatureExtractor::from_checkpoint(ck);
}

/// Small VGG-shaped extractor with the standard layout but narrow channels.
inline ExtractorConfig narrow_vgg() {
  ExtractorConfig c = ExtractorConfig::vgg19_head();
  for (auto& l : c.layers) {
    if (l.kind == LayerKind::Conv) l.out_channels = std::max(4, l.out_channels / 16);
  }
  return c;
}

/// Returns x_t unchanged; with eps = 0 the loss is mean(x_t^2).
class EchoInput final : public NoisePredictor {
 public:
  Var predict(const Var& x_t, int, const Var&) const override { return x_t; }
  int concept_dim() const override { return 1; }
};

/// Returns a fixed tensor regardless of input.
class ConstantPredictor final : public NoisePredictor {
 public:
  explicit ConstantPredictor(Tensor out) : out_(std::move(out)) {}
  Var predict(const Var&, int, const Var&) const override { return Var::constant(out_); }
  int concept_dim() const override { return 1; }

 private:
  Tensor out_;
};

}  // namespace cap::testing

#include <unistd.h>

#include <filesystem>
#include <string>

namespace cap::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name) {
    path_ = std::filesystem::temp_directory_path() / ("cap_test_" + name + "_" + random_suffix());
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  static std::string random_suffix() {
    static int counter = 0;
    return std::to_string(::getpid()) + "_" + std::to_string(++counter);
  }
  std::filesystem::path path_;
};

}  // namespace cap::testing
