#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "cap/attack.hpp"
#include "cap/diffusion.hpp"

namespace cap {

enum class TrainTarget { Denoiser, Concept, Both };

std::string to_string(TrainTarget t);
TrainTarget train_target_from(const std::string& s);

struct PersonalizationConfig {
  int training_steps = 500;
  double learning_rate = 1e-4;
  int batch_size = 2;
  TrainTarget what_to_train = TrainTarget::Both;
  /// Concept embeddings move slower than weights at this lr; scaled separately.
  double concept_lr_scale = 10.0;
  /// Draws per image used for the reported final loss.
  int eval_draws = 8;
  std::uint64_t seed = 0;

  /// 500 steps, lr 1e-4, batch 2, denoiser + embedding.
  static PersonalizationConfig desk();
  /// The reference large-model values: 1000 steps, lr 5e-7, batch 2.
  static PersonalizationConfig paper();

  void validate() const;
  nlohmann::json to_json() const;
  static PersonalizationConfig from_json(const nlohmann::json& j);
};

struct LearnedConcept {
  ConceptToken token;
  Denoiser denoiser;
  NoiseSchedule schedule;
  Shape image_shape;
  /// sha256 over the (order-normalised) training images and the config echo.
  std::string provenance;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> loss_curve;

  Checkpoint to_checkpoint() const;
  static LearnedConcept from_checkpoint(const Checkpoint& checkpoint);
  /// Provenance sidecar: hashes, config echo and loss summary.
  nlohmann::json sidecar(const PersonalizationConfig& config) const;
};

/// Thrown when training diverges; carries the state from before the failing step.
class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(const std::string& what, LearnedConcept last_valid)
      : NumericalError(what), last_valid_(std::make_shared<LearnedConcept>(std::move(last_valid))) {}
  const LearnedConcept& last_valid() const { return *last_valid_; }

 private:
  std::shared_ptr<const LearnedConcept> last_valid_;
};

/// Mean conditional loss over `draws` seeded (t, eps) per image; deterministic.
double evaluation_loss(const NoisePredictor& model, const ImageList& images, const Tensor& condition,
                       const NoiseSchedule& schedule, int draws, std::uint64_t seed);

/// Fine-tunes a copy of `base` (and/or the concept embedding) on `images`.
/// Images are ordered by content hash before batching, so the result does not
/// depend on input order.
LearnedConcept personalize(const Denoiser& base, const ConceptToken& initial, const NoiseSchedule& schedule,
                           const ImageList& images, const PersonalizationConfig& config);

/// Trains a freshly initialised denoiser on `images` with the null concept.
/// This is the pretrained base that personalization starts from.
Denoiser pretrain_base(const DenoiserConfig& config, const NoiseSchedule& schedule, const ImageList& images,
                       PersonalizationConfig training);

/// 16 by default, matching the evaluation protocol.
ImageList generate_from_concept(const LearnedConcept& learned, int count, std::uint64_t seed);

}  // namespace cap
