#include "cap/evaluation.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "cap/image_io.hpp"
#include "cap/log.hpp"

namespace cap {

namespace {


std::array<double, 3> marker_direction(int variant, int variants) {
  const double theta = 2.0 * std::numbers::pi * variant / variants;
  const double u[3] = {1.0 / std::sqrt(2.0), -1.0 / std::sqrt(2.0), 0.0};
  const double w[3] = {1.0 / std::sqrt(6.0), 1.0 / std::sqrt(6.0), -2.0 / std::sqrt(6.0)};
  return {std::cos(theta) * u[0] + std::sin(theta) * w[0], std::cos(theta) * u[1] + std::sin(theta) * w[1],
          std::cos(theta) * u[2] + std::sin(theta) * w[2]};
}

Tensor patch_template(int variant, int size) {
  Rng rng(derive_seed(0xBA7Cu, {static_cast<std::uint64_t>(variant)}));
  Tensor t({size, size});
  for (double& v : t.values()) v = rng.uniform() < 0.5 ? -1.0 : 1.0;
  return t;
}

std::array<double, 3> channel_means(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw std::invalid_argument("marker: expected an RGB image");
  std::array<double, 3> m{};
  const std::size_t plane = static_cast<std::size_t>(image.dim(1)) * image.dim(2);
  for (int c = 0; c < 3; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += image[c * plane + i];
    m[c] = s / static_cast<double>(plane);
  }
  return m;
}

ProbeArm run_arm(const Experiment& e, const ImageList& clean, const ImageList& marked, const MarkerSpec& spec) {
  ProbeArm arm;
  for (std::size_t i = 0; i < clean.size(); ++i) arm.input_scores.push_back(marker_score(marked[i], clean[i], spec));
  const LearnedConcept learned = personalize(e.base, e.token, e.schedule, marked, e.personalization);
  arm.final_loss = learned.final_loss;
  const Tensor reference = mean_image(clean);
  double total = 0.0;
  for (const Tensor& g : generate_from_concept(learned, e.generate_count, generation_seed(e))) {
    arm.output_scores.push_back(marker_score(g, reference, spec));
    total += arm.output_scores.back();
  }
  arm.output_score = total / static_cast<double>(arm.output_scores.size());
  return arm;
}

nlohmann::json arm_json(const ProbeArm& a) {
  return {{"input_scores", a.input_scores},
          {"output_scores", a.output_scores},
          {"output_score", a.output_score},
          {"final_loss", a.final_loss}};
}

template <class F>
auto stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

std::vector<ControlRun> controls_for(const Experiment& e, const std::vector<IdentityData>& identities) {
  std::vector<ControlRun> out;
  out.reserve(identities.size());
  for (const auto& id : identities) out.push_back(run_control(e, id));
  return out;
}

MetricReport report_with_controls(const Experiment& e, const std::vector<IdentityData>& identities,
                                  const std::vector<ControlRun>& controls,
                                  std::vector<IdentityOutcome>* outcomes = nullptr) {
  MetricReport report;
  report.config = e.to_json();
  report.seeds = {e.seed};
  for (std::size_t i = 0; i < identities.size(); ++i) {
    IdentityOutcome o = run_identity(e, identities[i], controls[i]);
    report.identities.push_back(o.metrics);
    if (outcomes) outcomes->push_back(std::move(o));
  }
  report.check_invariants();
  return report;
}

std::string metric_columns() {
  return "identity_similarity\tdetection_failure_proxy\tpost_personalization_loss\tstyle_transfer_score\t"
         "artifact_energy";
}

std::string metric_cells(const IdentityMetrics& m) {
  return format_double(m.identity_similarity) + '\t' + format_double(m.detection_failure_proxy) + '\t' +
         format_double(m.post_personalization_loss) + '\t' + format_double(m.style_transfer_score) + '\t' +
         format_double(m.artifact_energy);
}

}  // namespace

std::string to_string(SurrogateSource s) { return s == SurrogateSource::Base ? "base" : "clean_finetune"; }

SurrogateSource surrogate_source_from(const std::string& s) {
  if (s == "base") return SurrogateSource::Base;
  if (s == "clean_finetune") return SurrogateSource::CleanFinetune;
  throw std::invalid_argument("unknown surrogate source: " + s);
}

Experiment Experiment::with_seed(std::uint64_t s) const {
  Experiment e = *this;
  e.seed = s;
  e.attack.seed = derive_seed(s, {0xA7u});
  e.personalization.seed = derive_seed(s, {0x9Eu});
  return e;
}

nlohmann::json Experiment::to_json() const {
  return {{"attack", attack.to_json()},
          {"personalization", personalization.to_json()},
          {"surrogate", to_string(surrogate)},
          {"generate_count", generate_count},
          {"seed", seed},
          {"publish_bit_depth", publish_bit_depth},
          {"schedule", {{"steps", schedule.steps()}, {"beta_start", schedule.beta_start}, {"beta_end", schedule.beta_end}}},
          {"concept_identifier", token.identifier},
          {"denoiser", base.config().to_json()},
          {"extractor", extractor.config().to_json()}};
}

std::uint64_t generation_seed(const Experiment& e) { return derive_seed(e.seed, {0x6E4u}); }

ControlRun run_control(const Experiment& e, const IdentityData& identity) {
  ControlRun c{stage("control", [&] { return personalize(e.base, e.token, e.schedule, identity.clean, e.personalization); }),
               {}, {}};
  stage("control", [&] {
    c.generated = generate_from_concept(c.learned, e.generate_count, generation_seed(e));
    c.calibration = calibrate_detection(identity.clean, c.generated);
  });
  return c;
}

IdentityMetrics evaluate_identity(const Experiment& e, const IdentityData& identity, const ImageSet& published,
                                  const LearnedConcept& learned, const ImageList& generated,
                                  const ControlRun& control) {
  IdentityMetrics m;
  m.identity = identity.label;
  const SimilarityResult sim = identity_similarity(identity.clean, generated, e.extractor);
  m.identity_similarity = sim.mean;
  m.undetected = sim.undetected;
  m.detection_failure_proxy = detection_failure_proxy(generated, control.calibration, e.extractor);
  m.post_personalization_loss = learned.final_loss;
  m.style_transfer_score = style_transfer_score(generated, published.perturbed, e.extractor);
  m.artifact_energy = artifact_energy(published);
  m.generated = static_cast<int>(generated.size());
  return m;
}

ProtectResult protect_identity(const Experiment& e, const IdentityData& identity, const ControlRun& control) {
  const bool finetuned = e.surrogate == SurrogateSource::CleanFinetune;
  const Denoiser& surrogate = finetuned ? control.learned.denoiser : e.base;
  const ConceptToken& token = finetuned ? control.learned.token : e.token;
  return stage("protect", [&] {
    ProtectResult r = protect(ImageSet::from_clean(identity.clean, e.attack.eta, identity.label), e.attack, surrogate,
                              token, e.extractor, e.schedule);
    if (e.publish_bit_depth == 16) {
      r.images = quantize_within_budget(r.images);
      r.images.check_invariants();
    } else if (e.publish_bit_depth != 0) {
      throw std::invalid_argument("publish_bit_depth must be 0 or 16");
    }
    return r;
  });
}

IdentityOutcome personalize_published(const Experiment& e, const IdentityData& identity, ProtectResult protection,
                                      const ControlRun& control) {
  LearnedConcept learned = stage("personalize", [&] {
    return personalize(e.base, e.token, e.schedule, protection.images.perturbed, e.personalization);
  });
  ImageList generated = stage("generate", [&] { return generate_from_concept(learned, e.generate_count, generation_seed(e)); });
  IdentityMetrics metrics = stage("evaluate", [&] {
    return evaluate_identity(e, identity, protection.images, learned, generated, control);
  });
  log_info("identity.done", {{"identity", identity.label},
                             {"identity_similarity", metrics.identity_similarity},
                             {"post_personalization_loss", metrics.post_personalization_loss}});
  return {std::move(protection), std::move(learned), std::move(generated), std::move(metrics)};
}

IdentityOutcome run_identity(const Experiment& e, const IdentityData& identity, const ControlRun& control) {
  return personalize_published(e, identity, protect_identity(e, identity, control), control);
}

MetricReport run_experiment(const Experiment& e, const std::vector<IdentityData>& identities,
                            std::vector<IdentityOutcome>* outcomes) {
  if (identities.empty()) throw std::invalid_argument("run_experiment: no identities");
  return report_with_controls(e, identities, controls_for(e, identities), outcomes);
}

std::string to_string(MarkerKind k) { return k == MarkerKind::ColorShift ? "color_shift" : "patch"; }

MarkerKind marker_kind_from(const std::string& s) {
  if (s == "color_shift" || s == "style") return MarkerKind::ColorShift;
  if (s == "patch") return MarkerKind::Patch;
  throw std::invalid_argument("unknown marker kind: " + s);
}

void MarkerSpec::validate() const {
  if (!std::isfinite(strength) || strength < 0.0) throw std::invalid_argument("marker: strength must be finite and >= 0");
  if (kind == MarkerKind::Patch && patch_size < 2) throw std::invalid_argument("marker: patch needs size >= 2");
}

nlohmann::json MarkerSpec::to_json() const {
  return {{"kind", to_string(kind)}, {"strength", strength}, {"patch_size", patch_size}};
}

Tensor apply_marker(const Tensor& image, const MarkerSpec& spec, int variant, int variants) {
  spec.validate();
  if (variants < 1 || variant < 0 || variant >= variants) throw std::invalid_argument("marker: bad variant index");
  if (image.rank() != 3 || image.dim(0) != 3) throw std::invalid_argument("marker: expected an RGB image");
  Tensor out = image;
  const int h = image.dim(1), w = image.dim(2);
  if (spec.kind == MarkerKind::ColorShift) {
    const auto d = marker_direction(variant, variants);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < plane; ++i) {
        double& v = out[c * plane + i];
        v = std::clamp(v + spec.strength * d[c], 0.0, 1.0);
      }
    }
    return out;
  }
  if (spec.patch_size > h || spec.patch_size > w) throw std::invalid_argument("marker: patch larger than image");
  const Tensor t = patch_template(variant, spec.patch_size);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < spec.patch_size; ++y) {
      for (int x = 0; x < spec.patch_size; ++x) {
        double& v = out.at(c, y, x);
        v = std::clamp(v + spec.strength * t[y * spec.patch_size + x], 0.0, 1.0);
      }
    }
  }
  return out;
}

double marker_score(const Tensor& image, const Tensor& reference, const MarkerSpec& spec) {
  spec.validate();
  require_same_shape(image, reference, "marker_score");
  if (spec.kind == MarkerKind::ColorShift) {
    const auto a = channel_means(image);
    const auto b = channel_means(reference);
    const auto d = marker_direction(0, 1);
    return (a[0] - b[0]) * d[0] + (a[1] - b[1]) * d[1] + (a[2] - b[2]) * d[2];
  }
  const int p = spec.patch_size;
  if (p > image.dim(1) || p > image.dim(2)) throw std::invalid_argument("marker: patch larger than image");
  Tensor diff({1, p, p});
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < p; ++y) {
      for (int x = 0; x < p; ++x) diff[y * p + x] += (image.at(c, y, x) - reference.at(c, y, x)) / 3.0;
    }
  }
  return template_correlation(diff, patch_template(0, p).reshaped({1, p, p}));
}

nlohmann::json ProbeReport::to_json() const {
  return {{"marker", marker.to_json()},
          {"consistent", arm_json(consistent)},
          {"inconsistent", arm_json(inconsistent)},
          {"gap", gap()}};
}

ProbeReport consistency_transfer_probe(const Experiment& e, const ImageList& clean, const MarkerSpec& spec) {
  spec.validate();
  if (clean.size() < 2) throw std::invalid_argument("probe: need at least two images");
  const int n = static_cast<int>(clean.size());
  ImageList same, mixed;
  for (int i = 0; i < n; ++i) {
    same.push_back(apply_marker(clean[i], spec, 0, 1));
    mixed.push_back(apply_marker(clean[i], spec, i, n));
  }
  ProbeReport r;
  r.marker = spec;
  r.consistent = run_arm(e, clean, same, spec);
  r.inconsistent = run_arm(e, clean, mixed, spec);
  log_info("probe.done", {{"marker", to_string(spec.kind)}, {"gap", r.gap()}});
  return r;
}

std::vector<SweepRow> strength_sweep(const Experiment& e, const std::vector<IdentityData>& identities,
                                     const std::vector<double>& strengths) {
  if (identities.empty()) throw std::invalid_argument("strength_sweep: no identities");
  for (std::size_t i = 0; i < strengths.size(); ++i) {
    if (!(strengths[i] >= 0.0) || (i > 0 && !(strengths[i] > strengths[i - 1]))) {
      throw std::invalid_argument("strength_sweep: strengths must be non-negative and ascending");
    }
  }
  const std::vector<ControlRun> controls = controls_for(e, identities);
  std::vector<SweepRow> rows;
  for (double eta : strengths) {
    SweepRow row;
    row.eta = eta;
    try {
      Experiment run = e;
      run.attack.eta = eta;
      row.report = report_with_controls(run, identities, controls);
    } catch (const std::exception& ex) {
      row.error = ex.what();
      log_event(LogLevel::Error, "sweep.row_failed", {{"eta", eta}, {"error", row.error}});
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

AttackConfig apply_variant(const AttackConfig& base, const std::string& variant) {
  AttackConfig c = base;
  if (variant == "none") {
    c.loss_variant = LossVariant::None;
  } else if (variant == "style" || variant == "CAP") {
    c.loss_variant = LossVariant::Style;
    c.ratio_mode = RatioMode::Dynamic;
  } else if (variant == "content") {
    c.loss_variant = LossVariant::Content;
    c.ratio_mode = RatioMode::Dynamic;
  } else if (variant.rfind("Static_Ratio=", 0) == 0) {
    const std::string value = variant.substr(13);
    std::size_t used = 0;
    double r = 0.0;
    try {
      r = std::stod(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != value.size() || !(r >= 0.0)) throw std::invalid_argument("bad static ratio: " + variant);
    c.loss_variant = LossVariant::Style;
    c.ratio_mode = RatioMode::Static;
    c.static_ratio = r;
  } else {
    throw std::invalid_argument("unknown variant: " + variant);
  }
  c.validate();
  return c;
}

std::vector<std::string> ratio_ablation_variants() {
  return {"Static_Ratio=20", "Static_Ratio=40", "Static_Ratio=60", "Static_Ratio=80", "Static_Ratio=100", "CAP"};
}

std::vector<std::string> loss_ablation_variants() { return {"none", "content", "style"}; }

std::vector<AblationRow> ablation_suite(const Experiment& e, const std::vector<IdentityData>& identities,
                                        const std::vector<std::string>& variants) {
  if (identities.empty()) throw std::invalid_argument("ablation_suite: no identities");
  std::vector<AttackConfig> configs;
  for (const auto& v : variants) configs.push_back(apply_variant(e.attack, v));
  const std::vector<ControlRun> controls = controls_for(e, identities);
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < variants.size(); ++i) {
    Experiment run = e;
    run.attack = configs[i];
    rows.push_back({variants[i], report_with_controls(run, identities, controls)});
  }
  return rows;
}

std::string ablation_tsv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "variant\t" << metric_columns() << '\n';
  for (const auto& r : rows) os << r.variant << '\t' << metric_cells(r.report.aggregate()) << '\n';
  return os.str();
}

std::string sweep_tsv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "eta\t" << metric_columns() << "\terror\n";
  for (const auto& r : rows) {
    os << format_double(r.eta) << '\t';
    if (r.report) {
      os << metric_cells(r.report->aggregate()) << '\t' << '\n';
    } else {
      os << "\t\t\t\t\t" << r.error << '\n';
    }
  }
  return os.str();
}

}  // namespace cap
