#include "cap/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "cap/log.hpp"

namespace cap {

namespace {

std::vector<double> pooled(const FeatureExtractor& extractor, const Tensor& image) {
  std::vector<double> out;
  for (const Tensor& f : extractor.extract(image)) {
    const int c = f.dim(0);
    const int m = f.dim(1);
    const double scale = 1.0 / std::sqrt(static_cast<double>(c));
    for (int i = 0; i < c; ++i) {
      double s = 0.0;
      for (int j = 0; j < m; ++j) s += f[static_cast<std::size_t>(i) * m + j];
      out.push_back(scale * s / m);
    }
  }
  return out;
}

double norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v * v;
  return std::sqrt(s);
}

constexpr double kZeroNorm = 1e-12;

}  // namespace

Tensor embedding(const FeatureExtractor& extractor, const Tensor& image) {
  const std::vector<double> x = pooled(extractor, image);
  const std::vector<double> grey = pooled(extractor, Tensor(image.shape(), 0.5));
  Tensor out(Shape{static_cast<int>(x.size())});
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - grey[i];
  return out;
}

std::optional<double> cosine_similarity(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "cosine_similarity");
  const double na = norm(a), nb = norm(b);
  if (na < kZeroNorm || nb < kZeroNorm) return std::nullopt;
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}

SimilarityResult identity_similarity(const ImageList& clean, const ImageList& generated,
                                     const FeatureExtractor& extractor) {
  if (clean.empty() || generated.empty()) throw std::invalid_argument("identity_similarity: empty image set");
  Tensor reference;
  for (const Tensor& im : clean) {
    const Tensor e = embedding(extractor, im);
    if (reference.empty()) reference = Tensor::zeros_like(e);
    reference += e;
  }
  reference *= 1.0 / static_cast<double>(clean.size());
  if (norm(reference) < kZeroNorm) throw std::invalid_argument("identity_similarity: clean set embeds to zero");

  SimilarityResult r;
  double total = 0.0;
  for (const Tensor& g : generated) {
    const auto c = cosine_similarity(embedding(extractor, g), reference);
    if (c) {
      total += *c;
    } else {
      ++r.undetected;
    }
  }
  if (r.undetected > 0) log_warn("identity_similarity.undetected", {{"count", r.undetected}});
  r.mean = total / static_cast<double>(generated.size());
  return r;
}

double template_correlation(const Tensor& image, const Tensor& face_template) {
  require_same_shape(image, face_template, "template_correlation");
  const double ma = image.mean(), mb = face_template.mean();
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double a = image[i] - ma, b = face_template[i] - mb;
    sab += a * b;
    saa += a * a;
    sbb += b * b;
  }
  if (saa < kZeroNorm || sbb < kZeroNorm) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("quantile: no values");
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("quantile: q must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

Tensor mean_image(const ImageList& images) {
  if (images.empty()) throw std::invalid_argument("mean_image: empty image set");
  Tensor out = Tensor::zeros_like(images.front());
  for (const Tensor& im : images) out += im;
  out *= 1.0 / static_cast<double>(images.size());
  return out;
}

DetectionCalibration calibrate_detection(const ImageList& clean, const ImageList& calibration, double q) {
  DetectionCalibration c;
  c.face_template = mean_image(clean);
  std::vector<double> scores;
  for (const Tensor& im : calibration) scores.push_back(template_correlation(im, c.face_template));
  c.threshold = quantile(std::move(scores), q);
  return c;
}

double detection_failure_proxy(const ImageList& generated, const DetectionCalibration& calibration,
                               const FeatureExtractor& extractor) {
  if (generated.empty()) throw std::invalid_argument("detection_failure_proxy: empty image set");
  int failed = 0;
  for (const Tensor& g : generated) {
    const bool weak = template_correlation(g, calibration.face_template) < calibration.threshold;
    if (weak || norm(embedding(extractor, g)) < kZeroNorm) ++failed;
  }
  return static_cast<double>(failed) / static_cast<double>(generated.size());
}

double style_transfer_score(const ImageList& generated, const ImageList& reference, const FeatureExtractor& extractor) {
  if (generated.empty() || reference.empty()) throw std::invalid_argument("style_transfer_score: empty image set");
  const GramStack ref = compute_gram_stack(reference, extractor);
  double total = 0.0;
  for (const Tensor& g : generated) {
    const auto feats = extractor.extract(g);
    for (std::size_t l = 0; l < feats.size(); ++l) total += style_similarity(gram_matrix(feats[l], ref.norm), ref.mean_grams[l]);
  }
  return total / static_cast<double>(generated.size());
}

double artifact_energy(const ImageSet& images) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < images.clean.size(); ++i) {
    for (std::size_t j = 0; j < images.clean[i].size(); ++j) total += std::abs(images.perturbed[i][j] - images.clean[i][j]);
    count += images.clean[i].size();
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

nlohmann::json IdentityMetrics::to_json() const {
  return {{"identity", identity},
          {"identity_similarity", identity_similarity},
          {"detection_failure_proxy", detection_failure_proxy},
          {"post_personalization_loss", post_personalization_loss},
          {"style_transfer_score", style_transfer_score},
          {"artifact_energy", artifact_energy},
          {"generated", generated},
          {"undetected", undetected}};
}

IdentityMetrics IdentityMetrics::from_json(const nlohmann::json& j) {
  IdentityMetrics m;
  m.identity = j.at("identity").get<std::string>();
  m.identity_similarity = j.at("identity_similarity").get<double>();
  m.detection_failure_proxy = j.at("detection_failure_proxy").get<double>();
  m.post_personalization_loss = j.at("post_personalization_loss").get<double>();
  m.style_transfer_score = j.at("style_transfer_score").get<double>();
  m.artifact_energy = j.at("artifact_energy").get<double>();
  m.generated = j.at("generated").get<int>();
  m.undetected = j.at("undetected").get<int>();
  return m;
}

IdentityMetrics MetricReport::aggregate() const {
  IdentityMetrics a;
  a.identity = "mean";
  if (identities.empty()) return a;
  for (const auto& m : identities) {
    a.identity_similarity += m.identity_similarity;
    a.detection_failure_proxy += m.detection_failure_proxy;
    a.post_personalization_loss += m.post_personalization_loss;
    a.style_transfer_score += m.style_transfer_score;
    a.artifact_energy += m.artifact_energy;
    a.generated += m.generated;
    a.undetected += m.undetected;
  }
  const double n = static_cast<double>(identities.size());
  a.identity_similarity /= n;
  a.detection_failure_proxy /= n;
  a.post_personalization_loss /= n;
  a.style_transfer_score /= n;
  a.artifact_energy /= n;
  return a;
}

void MetricReport::check_invariants() const {
  for (const auto& m : identities) {
    if (!(m.identity_similarity >= -1.0 && m.identity_similarity <= 1.0)) {
      throw std::logic_error("metric report: identity_similarity outside [-1, 1] for " + m.identity);
    }
    if (!(m.detection_failure_proxy >= 0.0 && m.detection_failure_proxy <= 1.0)) {
      throw std::logic_error("metric report: detection_failure_proxy outside [0, 1] for " + m.identity);
    }
    if (!std::isfinite(m.post_personalization_loss) || !std::isfinite(m.style_transfer_score)) {
      throw std::logic_error("metric report: non-finite metric for " + m.identity);
    }
  }
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string MetricReport::to_tsv() const {
  std::ostringstream os;
  os << "identity\tidentity_similarity\tdetection_failure_proxy\tpost_personalization_loss\t"
        "style_transfer_score\tartifact_energy\tgenerated\tundetected\n";
  const auto row = [&](const IdentityMetrics& m) {
    os << m.identity << '\t' << format_double(m.identity_similarity) << '\t'
       << format_double(m.detection_failure_proxy) << '\t' << format_double(m.post_personalization_loss) << '\t'
       << format_double(m.style_transfer_score) << '\t' << format_double(m.artifact_energy) << '\t' << m.generated
       << '\t' << m.undetected << '\n';
  };
  for (const auto& m : identities) row(m);
  row(aggregate());
  return os.str();
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& m : identities) rows.push_back(m.to_json());
  return {{"identities", rows}, {"aggregate", aggregate().to_json()}, {"config", config}, {"seeds", seeds}};
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
  MetricReport r;
  for (const auto& row : j.at("identities")) r.identities.push_back(IdentityMetrics::from_json(row));
  r.config = j.at("config");
  r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  return r;
}

}  // namespace cap
