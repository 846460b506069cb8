#include <doctest.h>

#include <cmath>
#include <iostream>
#include <sstream>

#include "cap/log.hpp"
#include "cap/metrics.hpp"
#include "test_support.hpp"

using namespace cap;
using namespace cap::testing;

namespace {

// Image whose channel means sit at 0.5 + d_c.
Tensor shifted_grey(double d0, double d1, double d2, int size = 4) {
  Tensor t({3, size, size});
  const int plane = size * size;
  for (int i = 0; i < plane; ++i) {
    t[i] = 0.5 + d0;
    t[plane + i] = 0.5 + d1;
    t[2 * plane + i] = 0.5 + d2;
  }
  return t;
}

double oracle_cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

std::vector<double> channel_offsets(const Tensor& im) {
  std::vector<double> m(3, 0.0);
  const std::size_t plane = im.size() / 3;
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < plane; ++i) m[c] += im[c * plane + i];
    m[c] = m[c] / static_cast<double>(plane) - 0.5;
  }
  return m;
}

IdentityMetrics row(const std::string& id, double sim, double det, double loss) {
  IdentityMetrics m;
  m.identity = id;
  m.identity_similarity = sim;
  m.detection_failure_proxy = det;
  m.post_personalization_loss = loss;
  m.style_transfer_score = 2.0 * loss;
  m.artifact_energy = 0.01;
  m.generated = 4;
  return m;
}

}  // namespace

TEST_CASE("embedding of the identity extractor is the centred channel mean") {
  const FeatureExtractor ex = identity_extractor(3);
  const Tensor e = embedding(ex, shifted_grey(0.1, -0.2, 0.3));
  REQUIRE(e.size() == 3);
  CHECK(e[0] == doctest::Approx(0.1 / std::sqrt(3.0)));
  CHECK(e[1] == doctest::Approx(-0.2 / std::sqrt(3.0)));
  CHECK(e[2] == doctest::Approx(0.3 / std::sqrt(3.0)));
  const Tensor flat = embedding(ex, Tensor({3, 4, 4}, 0.5));
  for (double v : flat.values()) CHECK(v == 0.0);
}

TEST_CASE("identity similarity examples") {
  const FeatureExtractor ex = identity_extractor(3);
  const ImageList clean{shifted_grey(0.1, -0.1, 0.0)};
  CHECK(identity_similarity(clean, clean, ex).mean == doctest::Approx(1.0));
  CHECK(identity_similarity(clean, {shifted_grey(0.05, 0.05, -0.1)}, ex).mean == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(identity_similarity(clean, {shifted_grey(-0.1, 0.1, 0.0)}, ex).mean == doctest::Approx(-1.0));

  std::ostringstream log;
  set_log_stream(&log);
  set_log_level(LogLevel::Warn);
  const auto grey = identity_similarity(clean, {Tensor({3, 4, 4}, 0.5), clean[0]}, ex);
  set_log_level(LogLevel::Error);
  set_log_stream(&std::cerr);
  CHECK(grey.undetected == 1);
  CHECK(log.str().find("identity_similarity.undetected") != std::string::npos);
  CHECK(grey.mean == doctest::Approx(0.5));
  CHECK_THROWS(identity_similarity({Tensor({3, 4, 4}, 0.5)}, clean, ex));
  CHECK_THROWS(identity_similarity({}, clean, ex));
}

TEST_CASE("identity similarity matches an independent cosine") {
  const FeatureExtractor ex = identity_extractor(3);
  Rng rng(11);
  ImageList clean, gen;
  for (int i = 0; i < 3; ++i) clean.push_back(random_image(rng, 3, 4, 4));
  for (int i = 0; i < 5; ++i) gen.push_back(random_image(rng, 3, 4, 4));
  std::vector<double> ref(3, 0.0);
  for (const auto& c : clean) {
    const auto o = channel_offsets(c);
    for (int k = 0; k < 3; ++k) ref[k] += o[k] / 3.0;
  }
  double expect = 0.0;
  for (const auto& g : gen) expect += oracle_cosine(channel_offsets(g), ref) / 5.0;
  const double got = identity_similarity(clean, gen, ex).mean;
  CHECK(std::abs(got - expect) < 1e-6);
  CHECK(got >= -1.0);
  CHECK(got <= 1.0);
}

TEST_CASE("template correlation and quantile") {
  Rng rng(3);
  const Tensor a = random_image(rng, 3, 4, 4);
  Tensor neg = a;
  for (double& v : neg.values()) v = 1.0 - v;
  CHECK(template_correlation(a, a) == doctest::Approx(1.0));
  CHECK(template_correlation(neg, a) == doctest::Approx(-1.0));
  CHECK(template_correlation(Tensor({3, 4, 4}, 0.2), a) == 0.0);

  CHECK(quantile({4, 1, 3, 2}, 0.5) == doctest::Approx(2.5));
  CHECK(quantile({4, 1, 3, 2}, 0.0) == 1.0);
  CHECK(quantile({4, 1, 3, 2}, 1.0) == 4.0);
  CHECK(quantile({4, 1, 3, 2}, 0.05) == doctest::Approx(1.15));
  CHECK_THROWS(quantile({}, 0.5));
  CHECK_THROWS(quantile({1.0}, 1.5));
}

TEST_CASE("detection failure proxy") {
  const FeatureExtractor ex = identity_extractor(3);
  Rng rng(5);
  ImageList clean;
  for (int i = 0; i < 6; ++i) clean.push_back(random_image(rng, 3, 4, 4));
  const DetectionCalibration cal = calibrate_detection(clean, clean, 0.0);
  CHECK(detection_failure_proxy(clean, cal, ex) == 0.0);
  CHECK(detection_failure_proxy({Tensor({3, 4, 4}, 0.5)}, cal, ex) == 1.0);
  ImageList negated = clean;
  for (auto& im : negated) {
    for (double& v : im.values()) v = 1.0 - v;
  }
  const double f = detection_failure_proxy(negated, cal, ex);
  CHECK(f >= 0.0);
  CHECK(f <= 1.0);
  CHECK(f > 0.5);
}

TEST_CASE("style transfer score against an explicit Gram oracle") {
  const FeatureExtractor ex = identity_extractor(3);
  Rng rng(8);
  const ImageList ref{random_image(rng, 3, 2, 2), random_image(rng, 3, 2, 2)};
  const ImageList gen{random_image(rng, 3, 2, 2)};
  CHECK(style_transfer_score(ref, ref, ex) > 0.0);
  CHECK(style_transfer_score({ref[0]}, {ref[0]}, ex) == doctest::Approx(0.0));

  const auto gram = [](const Tensor& im, int i, int j) {
    double s = 0.0;
    for (int p = 0; p < 4; ++p) s += (im[i * 4 + p]) * (im[j * 4 + p]);
    return s / 12.0;
  };
  double expect = 0.0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const double target = 0.5 * (gram(ref[0], i, j) + gram(ref[1], i, j));
      expect += std::pow(gram(gen[0], i, j) - target, 2);
    }
  }
  CHECK(style_transfer_score(gen, ref, ex) == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("artifact energy is the mean absolute perturbation") {
  ImageSet s = ImageSet::from_clean({Tensor({1, 2, 2}, 0.5), Tensor({1, 2, 2}, 0.5)}, 0.1);
  CHECK(artifact_energy(s) == 0.0);
  s.perturbed[0][0] = 0.6;
  s.perturbed[1][3] = 0.42;
  CHECK(artifact_energy(s) == doctest::Approx((0.1 + 0.08) / 8.0));
}

TEST_CASE("metric report aggregation and serialisation") {
  MetricReport r;
  r.identities = {row("a", 0.2, 0.25, 1.0), row("b", 0.6, 0.75, 3.0)};
  r.seeds = {1, 2};
  const IdentityMetrics m = r.aggregate();
  CHECK(std::abs(m.identity_similarity - 0.4) < 1e-9);
  CHECK(std::abs(m.detection_failure_proxy - 0.5) < 1e-9);
  CHECK(std::abs(m.post_personalization_loss - 2.0) < 1e-9);
  CHECK(m.generated == 8);
  CHECK_NOTHROW(r.check_invariants());

  const std::string tsv = r.to_tsv();
  CHECK(std::count(tsv.begin(), tsv.end(), '\n') == 4);
  CHECK(tsv.find("\nmean\t0.4") != std::string::npos);
  CHECK(MetricReport::from_json(r.to_json()).to_json() == r.to_json());

  r.identities[0].detection_failure_proxy = 1.5;
  CHECK_THROWS(r.check_invariants());
  r.identities[0].detection_failure_proxy = 0.0;
  r.identities[1].identity_similarity = 1.1;
  CHECK_THROWS(r.check_invariants());
}

TEST_CASE("format_double round trips") {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-17, 12345.678}) CHECK(std::stod(format_double(v)) == v);
}
