#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cap/diffusion.hpp"
#include "cap/style.hpp"

namespace cap {

/// Raised when a gradient or loss turns non-finite mid-run.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Clean images x_i, their protected versions x'_i and the max-norm budget.
struct ImageSet {
  ImageList clean;
  ImageList perturbed;
  double eta = 0.05;
  std::string identity_label;

  static ImageSet from_clean(ImageList clean, double eta, std::string label = {});
  std::size_t size() const { return clean.size(); }
  /// max_i ||x'_i - x_i||_inf.
  double max_perturbation() const;
  /// Throws std::logic_error unless every x' lies in [0, 1] and within eta + tolerance of x.
  void check_invariants(double tolerance = 1e-7) const;
};

enum class LossVariant { None, Style, Content };
enum class RatioMode { Dynamic, Static };
enum class SurrogateMode { Fixed, Alternating };
/// Noise used to score ratio candidates: the draws the gradients were taken
/// under, or a second frozen draw per image shared by all candidates.
enum class RatioReplay { Shared, Heldout };

std::string to_string(LossVariant v);
std::string to_string(RatioMode m);
std::string to_string(SurrogateMode m);
std::string to_string(RatioReplay r);
LossVariant loss_variant_from(const std::string& s);
RatioMode ratio_mode_from(const std::string& s);
SurrogateMode surrogate_mode_from(const std::string& s);
RatioReplay ratio_replay_from(const std::string& s);

/// `points` evenly spaced candidates over [0, range], both ends included.
std::vector<double> linear_ratio_grid(double range, int points);

struct AttackConfig {
  int iterations = 20;     // K
  int start_step = 0;      // k-hat; 0 selects ceil(K / 2)
  double alpha = 0.005;
  double eta = 0.05;
  std::vector<double> ratio_grid = linear_ratio_grid(100.0, 11);
  RatioMode ratio_mode = RatioMode::Dynamic;
  RatioReplay ratio_replay = RatioReplay::Heldout;
  double static_ratio = 0.0;
  int consistency_sign = -1;
  LossVariant loss_variant = LossVariant::Style;
  int content_tap = -1;    // -1 selects the deepest tap
  GramNorm gram_norm = GramNorm::ChannelsPixels;
  SurrogateMode surrogate_mode = SurrogateMode::Fixed;
  int surrogate_steps = 2;
  double surrogate_learning_rate = 1e-4;
  std::uint64_t seed = 0;

  int resolved_start_step() const;
  void validate() const;
  nlohmann::json to_json() const;
  static AttackConfig from_json(const nlohmann::json& j);
};

/// One frozen (t, eps) draw per image.
struct Replay {
  std::vector<NoiseDraw> draws;
};

/// Draws for iteration `iteration`; distinct streams give independent draws.
Replay make_replay(std::uint64_t seed, int iteration, std::size_t count, const Shape& shape,
                   const NoiseSchedule& schedule, std::uint64_t stream = 0);

/// sum_i conditional_loss(model, x_i, concept) under the given replay.
Var reconstruction_loss(const NoisePredictor& model, const std::vector<Var>& images, const Var& condition,
                        const NoiseSchedule& schedule, const Replay& replay);
double reconstruction_loss_value(const NoisePredictor& model, const ImageList& images, const Tensor& condition,
                                 const NoiseSchedule& schedule, const Replay& replay);

/// x' <- clip_[0,1](clip_[x - eta, x + eta](x' + alpha * sign(grad))). sign(0) = 0.
ImageList pgd_step(const ImageList& perturbed, const ImageList& gradient, double alpha, const ImageList& clean,
                   double eta);

/// grad_re + weight * grad_consistency, per image.
ImageList combine_gradients(const ImageList& recon_grad, const ImageList& consistency_grad, double weight);

struct RatioCandidate {
  double ratio = 0.0;
  double recon_after = 0.0;
};

struct RatioSearchResult {
  double lambda = 0.0;
  std::vector<RatioCandidate> table;
};

using ReconEvaluator = std::function<double(const ImageList&)>;
using ConsistencyFn = std::function<Var(const std::vector<Var>&)>;

/// For each r in grid: trial-step along grad_re + sign * r * grad_consistency,
/// evaluate the reconstruction loss on the trial images, keep the largest.
/// Ties go to the earlier (smaller) grid entry.
RatioSearchResult ratio_search(const ImageList& perturbed, const ImageList& recon_grad,
                               const ImageList& consistency_grad, std::span<const double> grid, int consistency_sign,
                               double alpha, const ImageList& clean, double eta, const ReconEvaluator& recon);

/// Convenience form that computes both gradients under `replay` first.
RatioSearchResult ratio_search(const ImageList& perturbed, const NoisePredictor& model, const ConceptToken& token,
                               const NoiseSchedule& schedule, const ConsistencyFn& consistency,
                               std::span<const double> grid, int consistency_sign, double alpha,
                               const ImageList& clean, double eta, const Replay& replay);

struct IterationRecord {
  int k = 0;
  double recon_loss = 0.0;
  bool consistency_active = false;
  double consistency_loss = 0.0;
  double lambda = 0.0;
  std::vector<RatioCandidate> candidates;
  double wall_ms = 0.0;  // not serialized: traces stay reproducible

  nlohmann::json to_json() const;
};

struct IterationTrace {
  std::vector<IterationRecord> records;

  /// One JSON object per line, one line per iteration.
  std::string to_jsonl() const;
  static IterationTrace from_jsonl(const std::string& text);
};

/// Everything an observer may inspect at iteration k, before the committed step.
struct IterationContext {
  int k;
  const ImageList& perturbed;
  const ImageList& clean;
  const Replay& replay;
  const Replay& eval_replay;  // scores ratio candidates
  const Denoiser& surrogate;
  const IterationRecord& record;
};

using IterationObserver = std::function<void(const IterationContext&)>;

struct ProtectResult {
  ImageSet images;
  IterationTrace trace;
};

/// Builds the consistency term selected by the config (empty for LossVariant::None).
ConsistencyFn make_consistency_fn(const AttackConfig& config, const FeatureExtractor& extractor);

/// Personalization steps on the current perturbed images (ASPL-style moving surrogate).
Denoiser alternating_surrogate_update(const Denoiser& model, const ImageList& images, const ConceptToken& token,
                                      const NoiseSchedule& schedule, int steps, double learning_rate,
                                      std::uint64_t seed);

ProtectResult protect(const ImageSet& input, const AttackConfig& config, const Denoiser& surrogate,
                      const ConceptToken& token, const FeatureExtractor& extractor, const NoiseSchedule& schedule,
                      const IterationObserver& observer = {});

}  // namespace cap
