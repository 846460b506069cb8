#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cap/attack.hpp"
#include "cap/style.hpp"

namespace cap {

/// Proxy identity embedding: per-tap global-average-pooled features relative
/// to those of a mid-grey image, each tap block scaled by 1/sqrt(C).
/// A featureless (flat grey) image embeds to the zero vector.
Tensor embedding(const FeatureExtractor& extractor, const Tensor& image);

/// Cosine of two vectors; empty when either has (near) zero norm.
std::optional<double> cosine_similarity(const Tensor& a, const Tensor& b);

struct SimilarityResult {
  double mean = 0.0;
  int undetected = 0;  // zero-norm embeddings, scored as 0
};

/// Mean over generated images of cos(embedding(g), mean clean embedding).
SimilarityResult identity_similarity(const ImageList& clean, const ImageList& generated,
                                     const FeatureExtractor& extractor);

/// Pearson correlation over all pixels; 0 when either image is constant.
double template_correlation(const Tensor& image, const Tensor& face_template);

/// Linear-interpolated quantile, q in [0, 1].
double quantile(std::vector<double> values, double q);

/// Per-pixel mean of a set.
Tensor mean_image(const ImageList& images);

struct DetectionCalibration {
  Tensor face_template;
  double threshold = 0.0;
};

/// Template = mean clean image; threshold = q-quantile of the calibration
/// images' template correlations.
DetectionCalibration calibrate_detection(const ImageList& clean, const ImageList& calibration, double q = 0.05);

/// Fraction of images whose template correlation falls below the threshold
/// or whose embedding has zero norm.
double detection_failure_proxy(const ImageList& generated, const DetectionCalibration& calibration,
                               const FeatureExtractor& extractor);

/// Mean over generated images of sum_l ||G_l(g) - mean_i G_l(reference_i)||^2.
double style_transfer_score(const ImageList& generated, const ImageList& reference, const FeatureExtractor& extractor);

/// Mean |x' - x| over every pixel of the set.
double artifact_energy(const ImageSet& images);

struct IdentityMetrics {
  std::string identity;
  double identity_similarity = 0.0;
  double detection_failure_proxy = 0.0;
  double post_personalization_loss = 0.0;
  double style_transfer_score = 0.0;
  double artifact_energy = 0.0;
  int generated = 0;
  int undetected = 0;

  nlohmann::json to_json() const;
  static IdentityMetrics from_json(const nlohmann::json& j);
};

struct MetricReport {
  std::vector<IdentityMetrics> identities;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::uint64_t> seeds;

  /// Field-wise mean of the per-identity entries (counts are summed).
  IdentityMetrics aggregate() const;
  void check_invariants() const;
  /// Header plus one row per identity and a final "mean" row.
  std::string to_tsv() const;
  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
};

/// Shortest decimal that round-trips the double.
std::string format_double(double v);

}  // namespace cap
