#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cap/attack.hpp"
#include "cap/metrics.hpp"
#include "cap/personalization.hpp"

namespace cap {

enum class SurrogateSource {
  Base,           // attack the pretrained model as is
  CleanFinetune,  // attack the model personalized on the clean images
};

std::string to_string(SurrogateSource s);
SurrogateSource surrogate_source_from(const std::string& s);

/// A pipeline failure tagged with the stage that raised it.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Everything one protect -> personalize -> generate -> evaluate pass needs.
struct Experiment {
  Denoiser base;
  FeatureExtractor extractor;
  ConceptToken token;
  NoiseSchedule schedule;
  AttackConfig attack;
  PersonalizationConfig personalization;
  SurrogateSource surrogate = SurrogateSource::CleanFinetune;
  int generate_count = 16;
  std::uint64_t seed = 0;
  /// 16: protected images are rounded to 16-bit codes inside the budget before
  /// anyone trains on them, as a stored file would be. 0: keep full precision.
  int publish_bit_depth = 0;

  /// Copy with every stage reseeded from `seed`.
  Experiment with_seed(std::uint64_t seed) const;
  nlohmann::json to_json() const;
};

struct IdentityData {
  std::string label;
  ImageList clean;
};

/// Personalization on the clean images: control arm, detection calibration
/// and (with SurrogateSource::CleanFinetune) the attack surrogate.
struct ControlRun {
  LearnedConcept learned;
  ImageList generated;
  DetectionCalibration calibration;
};

ControlRun run_control(const Experiment& experiment, const IdentityData& identity);

/// Seed for every generate call of an experiment.
std::uint64_t generation_seed(const Experiment& experiment);

struct IdentityOutcome {
  ProtectResult protection;
  LearnedConcept learned;
  ImageList generated;
  IdentityMetrics metrics;
};

/// The protect stage alone (published at experiment.publish_bit_depth).
ProtectResult protect_identity(const Experiment& experiment, const IdentityData& identity, const ControlRun& control);

/// personalize on `protection` -> generate -> metrics.
IdentityOutcome personalize_published(const Experiment& experiment, const IdentityData& identity,
                                      ProtectResult protection, const ControlRun& control);

/// protect -> personalize on the protected set -> generate -> metrics.
/// Reuses `control` when given (it only depends on the clean set and seeds).
IdentityOutcome run_identity(const Experiment& experiment, const IdentityData& identity,
                             const ControlRun& control);

/// Metrics for an arbitrary trained concept against a control run.
IdentityMetrics evaluate_identity(const Experiment& experiment, const IdentityData& identity, const ImageSet& published,
                                  const LearnedConcept& learned, const ImageList& generated,
                                  const ControlRun& control);

MetricReport run_experiment(const Experiment& experiment, const std::vector<IdentityData>& identities,
                            std::vector<IdentityOutcome>* outcomes = nullptr);

// --- consistency-transfer probe ------------------------------------------------

enum class MarkerKind { ColorShift, Patch };

std::string to_string(MarkerKind k);
MarkerKind marker_kind_from(const std::string& s);

struct MarkerSpec {
  MarkerKind kind = MarkerKind::ColorShift;
  double strength = 0.3;
  int patch_size = 8;

  void validate() const;
  nlohmann::json to_json() const;
};

/// Stamps marker `variant` out of `variants` onto the image. Variant 0 is the
/// canonical marker; the others rotate the colour direction or redraw the patch.
Tensor apply_marker(const Tensor& image, const MarkerSpec& spec, int variant, int variants);

/// Presence of the canonical marker in `image` relative to `reference`:
/// colour shift projected on the marker direction, or patch NCC with the template.
double marker_score(const Tensor& image, const Tensor& reference, const MarkerSpec& spec);

struct ProbeArm {
  std::vector<double> input_scores;
  std::vector<double> output_scores;
  double output_score = 0.0;
  double final_loss = 0.0;
};

struct ProbeReport {
  MarkerSpec marker;
  ProbeArm consistent;
  ProbeArm inconsistent;

  double gap() const { return consistent.output_score - inconsistent.output_score; }
  nlohmann::json to_json() const;
};

/// Personalizes on a consistently marked copy of `clean` and on a copy where
/// every image carries a different marker, then scores the generations.
ProbeReport consistency_transfer_probe(const Experiment& experiment, const ImageList& clean, const MarkerSpec& spec);

// --- sweeps and ablations -------------------------------------------------------

struct SweepRow {
  double eta = 0.0;
  std::optional<MetricReport> report;
  std::string error;
};

/// One row per strength; a failing row records its error and the rest continue.
std::vector<SweepRow> strength_sweep(const Experiment& experiment, const std::vector<IdentityData>& identities,
                                     const std::vector<double>& strengths);

/// Applies a named variant to an attack config. Names: "none", "style",
/// "content", "CAP" (style + dynamic ratio), "Static_Ratio=<r>".
AttackConfig apply_variant(const AttackConfig& base, const std::string& variant);

/// The static grid {20, 40, 60, 80, 100} followed by "CAP".
std::vector<std::string> ratio_ablation_variants();
/// "none", "content", "style".
std::vector<std::string> loss_ablation_variants();

struct AblationRow {
  std::string variant;
  MetricReport report;
};

std::vector<AblationRow> ablation_suite(const Experiment& experiment, const std::vector<IdentityData>& identities,
                                        const std::vector<std::string>& variants);

std::string ablation_tsv(const std::vector<AblationRow>& rows);
std::string sweep_tsv(const std::vector<SweepRow>& rows);

}  // namespace cap
