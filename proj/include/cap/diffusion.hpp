#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cap/autograd.hpp"
#include "cap/checkpoint.hpp"
#include "cap/parameters.hpp"
#include "cap/random.hpp"

namespace cap {

/// Linear beta schedule and its cumulative products. Timesteps are 1-based.
struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  double beta_start = 0.0;
  double beta_end = 0.0;

  int steps() const { return static_cast<int>(betas.size()); }
  double beta(int t) const { return betas.at(t - 1); }
  double alpha(int t) const { return alphas.at(t - 1); }
  double alpha_bar(int t) const { return alpha_bars.at(t - 1); }
  void check_timestep(int t) const;
};

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end);

/// The desk default: 100 steps, betas 1e-4 -> 0.02.
inline NoiseSchedule default_schedule() { return make_schedule(100, 1e-4, 0.02); }

/// sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps.
Tensor noise_with_alpha_bar(const Tensor& x0, double alpha_bar, const Tensor& eps);
Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule);
Var forward_noise(const Var& x0, int t, const Tensor& eps, const NoiseSchedule& schedule);

struct ConceptToken {
  std::string identifier;
  Tensor embedding;  // {concept_dim}

  void validate() const;
  static ConceptToken null(int dim) { return {"<null>", Tensor(Shape{dim})}; }
  static ConceptToken random(std::string identifier, int dim, std::uint64_t seed, double scale = 1.0);
};

/// eps_theta(x_t, t, c). Implementations must be safe to call concurrently.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual Var predict(const Var& x_t, int t, const Var& condition) const = 0;
  virtual int concept_dim() const = 0;
};

/// One (t, eps) draw; frozen draws make losses replayable.
struct NoiseDraw {
  int t = 1;
  Tensor eps;
};

NoiseDraw draw_noise(Rng& rng, const Shape& shape, const NoiseSchedule& schedule);

/// mean((eps - eps_theta(x_t, t, c))^2) with x_t = forward_noise(x0, t, eps).
Var conditional_loss(const NoisePredictor& model, const Var& x0, const Var& condition,
                     const NoiseSchedule& schedule, const NoiseDraw& draw);
/// Seeded variant: t ~ U{1..T}, eps ~ N(0, I) drawn from `seed`.
Var conditional_loss(const NoisePredictor& model, const Var& x0, const Var& condition,
                     const NoiseSchedule& schedule, std::uint64_t seed);

/// conditional_loss with the condition held at the null (all-zero) embedding.
Var unconditional_loss(const NoisePredictor& model, const Var& x0, const NoiseSchedule& schedule,
                       const NoiseDraw& draw);
Var unconditional_loss(const NoisePredictor& model, const Var& x0, const NoiseSchedule& schedule,
                       std::uint64_t seed);

struct DenoiserConfig {
  int image_channels = 3;
  std::vector<int> level_channels{32, 64, 64};
  int mid_channels = 64;
  int time_dim = 32;
  int embed_dim = 64;
  int concept_dim = 16;
  std::uint64_t init_seed = 1234;

  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
  /// Spatial sizes must be divisible by this.
  int spatial_multiple() const { return 1 << level_channels.size(); }
};

/// Small U-Net noise predictor. Timestep and condition embeddings are summed
/// and injected additively into every residual block.
class Denoiser final : public NoisePredictor {
 public:
  explicit Denoiser(DenoiserConfig config = {});

  Var predict(const Var& x_t, int t, const Var& condition) const override;
  int concept_dim() const override { return config_.concept_dim; }

  const DenoiserConfig& config() const { return config_; }
  const ParameterSet& parameters() const { return params_; }
  ParameterSet& parameters() { return params_; }
  bool all_finite() const { return params_.all_finite(); }

  Checkpoint to_checkpoint(const NoiseSchedule& schedule) const;
  /// Returns the denoiser; the stored schedule is written to `schedule` if given.
  static Denoiser from_checkpoint(const Checkpoint& checkpoint, NoiseSchedule* schedule = nullptr);

 private:
  void add_block(const std::string& prefix, int in_ch, int out_ch, Rng& rng);
  Var run_block(const std::string& prefix, const Var& h, const Var& emb) const;
  const Var& p(const std::string& name) const { return params_.get(name); }

  DenoiserConfig config_;
  ParameterSet params_;
};

Tensor timestep_embedding(int t, int dim);

/// Ancestral DDPM sampling from pure noise. Output clamped to [0, 1].
/// Image i uses a stream derived from (seed, i), so results do not depend on count.
ImageList generate(const Denoiser& model, const ConceptToken& token, const NoiseSchedule& schedule,
                   int count, std::uint64_t seed, const Shape& image_shape);

}  // namespace cap
