#include "cap/attack.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>

#include "cap/log.hpp"
#include "cap/ops.hpp"

namespace cap {

namespace {

std::vector<Var> as_leaves(const ImageList& images, bool requires_grad) {
  std::vector<Var> out;
  out.reserve(images.size());
  for (const Tensor& im : images) out.emplace_back(im, requires_grad);
  return out;
}

void require_matching(const ImageList& a, const ImageList& b, const char* what) {
  if (a.size() != b.size()) throw std::invalid_argument(std::string(what) + ": image count mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) require_same_shape(a[i], b[i], what);
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

ImageSet ImageSet::from_clean(ImageList clean, double eta, std::string label) {
  if (clean.empty()) throw std::invalid_argument("ImageSet: no images");
  for (const Tensor& im : clean) {
    require_same_shape(clean.front(), im, "ImageSet");
    for (double v : im.values()) {
      if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("ImageSet: clean pixels must lie in [0, 1]");
    }
  }
  ImageSet s;
  s.perturbed = clean;
  s.clean = std::move(clean);
  s.eta = eta;
  s.identity_label = std::move(label);
  return s;
}

double ImageSet::max_perturbation() const {
  double m = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    for (std::size_t j = 0; j < clean[i].size(); ++j) m = std::max(m, std::abs(perturbed[i][j] - clean[i][j]));
  }
  return m;
}

void ImageSet::check_invariants(double tolerance) const {
  require_matching(clean, perturbed, "ImageSet");
  for (const Tensor& im : perturbed) {
    for (double v : im.values()) {
      if (!(v >= 0.0 && v <= 1.0)) throw std::logic_error("ImageSet: perturbed pixel outside [0, 1]");
    }
  }
  const double m = max_perturbation();
  if (m > eta + tolerance) {
    std::ostringstream os;
    os << "ImageSet: perturbation " << m << " exceeds budget " << eta;
    throw std::logic_error(os.str());
  }
}

std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::None: return "none";
    case LossVariant::Style: return "style";
    case LossVariant::Content: return "content";
  }
  return "?";
}

std::string to_string(RatioMode m) { return m == RatioMode::Dynamic ? "dynamic" : "static"; }
std::string to_string(SurrogateMode m) { return m == SurrogateMode::Fixed ? "fixed" : "alternating"; }
std::string to_string(RatioReplay r) { return r == RatioReplay::Shared ? "shared" : "heldout"; }

LossVariant loss_variant_from(const std::string& s) {
  if (s == "none") return LossVariant::None;
  if (s == "style") return LossVariant::Style;
  if (s == "content") return LossVariant::Content;
  throw std::invalid_argument("unknown loss variant: " + s);
}

RatioMode ratio_mode_from(const std::string& s) {
  if (s == "dynamic") return RatioMode::Dynamic;
  if (s == "static") return RatioMode::Static;
  throw std::invalid_argument("unknown ratio mode: " + s);
}

SurrogateMode surrogate_mode_from(const std::string& s) {
  if (s == "fixed") return SurrogateMode::Fixed;
  if (s == "alternating") return SurrogateMode::Alternating;
  throw std::invalid_argument("unknown surrogate mode: " + s);
}

RatioReplay ratio_replay_from(const std::string& s) {
  if (s == "shared") return RatioReplay::Shared;
  if (s == "heldout") return RatioReplay::Heldout;
  throw std::invalid_argument("unknown ratio replay: " + s);
}

std::vector<double> linear_ratio_grid(double range, int points) {
  if (points < 1 || !(range >= 0.0)) throw std::invalid_argument("ratio grid needs points >= 1 and range >= 0");
  if (points == 1) return {0.0};
  std::vector<double> grid(points);
  for (int i = 0; i < points; ++i) grid[i] = range * i / (points - 1);
  return grid;
}

int AttackConfig::resolved_start_step() const {
  return start_step > 0 ? start_step : std::max(1, (iterations + 1) / 2);
}

void AttackConfig::validate() const {
  if (iterations < 0) throw std::invalid_argument("attack: iterations must be >= 0");
  if (start_step < 0 || (iterations > 0 && resolved_start_step() > iterations)) {
    throw std::invalid_argument("attack: start step must satisfy 1 <= k_hat <= K");
  }
  if (!(alpha > 0.0)) throw std::invalid_argument("attack: alpha must be positive");
  if (!(eta >= 0.0)) throw std::invalid_argument("attack: eta must be non-negative");
  if (consistency_sign != 1 && consistency_sign != -1) throw std::invalid_argument("attack: consistency sign is +1 or -1");
  if (ratio_mode == RatioMode::Dynamic) {
    if (ratio_grid.empty()) throw std::invalid_argument("attack: empty ratio grid");
    if (std::find(ratio_grid.begin(), ratio_grid.end(), 0.0) == ratio_grid.end()) {
      throw std::invalid_argument("attack: ratio grid must contain 0");
    }
    for (std::size_t i = 0; i < ratio_grid.size(); ++i) {
      if (!(ratio_grid[i] >= 0.0) || (i > 0 && !(ratio_grid[i] > ratio_grid[i - 1]))) {
        throw std::invalid_argument("attack: ratio grid must be non-negative and strictly increasing");
      }
    }
  } else if (!(static_ratio >= 0.0)) {
    throw std::invalid_argument("attack: static ratio must be non-negative");
  }
  if (surrogate_steps < 0) throw std::invalid_argument("attack: surrogate steps must be >= 0");
}

nlohmann::json AttackConfig::to_json() const {
  return {{"iterations", iterations},
          {"start_step", resolved_start_step()},
          {"alpha", alpha},
          {"eta", eta},
          {"ratio_grid", ratio_grid},
          {"ratio_mode", to_string(ratio_mode)},
          {"ratio_replay", to_string(ratio_replay)},
          {"static_ratio", static_ratio},
          {"consistency_sign", consistency_sign},
          {"loss_variant", to_string(loss_variant)},
          {"content_tap", content_tap},
          {"gram_norm", gram_norm == GramNorm::Raw ? "raw" : "chw"},
          {"surrogate_mode", to_string(surrogate_mode)},
          {"surrogate_steps", surrogate_steps},
          {"surrogate_learning_rate", surrogate_learning_rate},
          {"seed", seed}};
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j) {
  AttackConfig c;
  c.iterations = j.at("iterations").get<int>();
  c.start_step = j.at("start_step").get<int>();
  c.alpha = j.at("alpha").get<double>();
  c.eta = j.at("eta").get<double>();
  c.ratio_grid = j.at("ratio_grid").get<std::vector<double>>();
  c.ratio_mode = ratio_mode_from(j.at("ratio_mode").get<std::string>());
  c.ratio_replay = ratio_replay_from(j.at("ratio_replay").get<std::string>());
  c.static_ratio = j.at("static_ratio").get<double>();
  c.consistency_sign = j.at("consistency_sign").get<int>();
  c.loss_variant = loss_variant_from(j.at("loss_variant").get<std::string>());
  c.content_tap = j.at("content_tap").get<int>();
  c.gram_norm = j.at("gram_norm").get<std::string>() == "raw" ? GramNorm::Raw : GramNorm::ChannelsPixels;
  c.surrogate_mode = surrogate_mode_from(j.at("surrogate_mode").get<std::string>());
  c.surrogate_steps = j.at("surrogate_steps").get<int>();
  c.surrogate_learning_rate = j.at("surrogate_learning_rate").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

Replay make_replay(std::uint64_t seed, int iteration, std::size_t count, const Shape& shape,
                   const NoiseSchedule& schedule, std::uint64_t stream) {
  Replay r;
  r.draws.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(stream == 0 ? derive_seed(seed, {0x5E11u, static_cast<std::uint64_t>(iteration), i})
                        : derive_seed(seed, {0x5E11u, static_cast<std::uint64_t>(iteration), i, stream}));
    r.draws.push_back(draw_noise(rng, shape, schedule));
  }
  return r;
}

Var reconstruction_loss(const NoisePredictor& model, const std::vector<Var>& images, const Var& condition,
                        const NoiseSchedule& schedule, const Replay& replay) {
  if (images.empty()) throw std::invalid_argument("reconstruction_loss: empty image set");
  if (replay.draws.size() != images.size()) throw std::invalid_argument("reconstruction_loss: one draw per image");
  std::vector<Var> terms;
  terms.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    terms.push_back(conditional_loss(model, images[i], condition, schedule, replay.draws[i]));
  }
  Var total = ops::add_n(terms);
  if (!std::isfinite(total.value().item())) throw NumericalError("reconstruction loss is not finite");
  return total;
}

double reconstruction_loss_value(const NoisePredictor& model, const ImageList& images, const Tensor& condition,
                                 const NoiseSchedule& schedule, const Replay& replay) {
  NoGradGuard no_grad;
  return reconstruction_loss(model, as_leaves(images, false), Var::constant(condition), schedule, replay)
      .value()
      .item();
}

ImageList pgd_step(const ImageList& perturbed, const ImageList& gradient, double alpha, const ImageList& clean,
                   double eta) {
  require_matching(perturbed, gradient, "pgd_step");
  require_matching(perturbed, clean, "pgd_step");
  ImageList out = perturbed;
  for (std::size_t i = 0; i < out.size(); ++i) {
    Tensor& x = out[i];
    const Tensor& g = gradient[i];
    const Tensor& x0 = clean[i];
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (!std::isfinite(g[j])) {
        throw NumericalError("pgd_step: non-finite gradient at image " + std::to_string(i) + ", element " +
                             std::to_string(j));
      }
      const double stepped = x[j] + alpha * sign(g[j]);
      const double projected = std::clamp(stepped, x0[j] - eta, x0[j] + eta);
      x[j] = std::clamp(projected, 0.0, 1.0);
    }
  }
  return out;
}

ImageList combine_gradients(const ImageList& recon_grad, const ImageList& consistency_grad, double weight) {
  require_matching(recon_grad, consistency_grad, "combine_gradients");
  ImageList out = recon_grad;
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t j = 0; j < out[i].size(); ++j) out[i][j] += weight * consistency_grad[i][j];
  }
  return out;
}

RatioSearchResult ratio_search(const ImageList& perturbed, const ImageList& recon_grad,
                               const ImageList& consistency_grad, std::span<const double> grid, int consistency_sign,
                               double alpha, const ImageList& clean, double eta, const ReconEvaluator& recon) {
  if (grid.empty()) throw std::invalid_argument("ratio_search: empty ratio grid");
  RatioSearchResult result;
  result.table.reserve(grid.size());
  double best = -std::numeric_limits<double>::infinity();
  for (double r : grid) {
    const ImageList trial =
        pgd_step(perturbed, combine_gradients(recon_grad, consistency_grad, consistency_sign * r), alpha, clean, eta);
    const double value = recon(trial);
    if (!std::isfinite(value)) throw NumericalError("ratio_search: non-finite reconstruction loss");
    result.table.push_back({r, value});
    if (value > best) {
      best = value;
      result.lambda = r;
    }
  }
  return result;
}

RatioSearchResult ratio_search(const ImageList& perturbed, const NoisePredictor& model, const ConceptToken& token,
                               const NoiseSchedule& schedule, const ConsistencyFn& consistency,
                               std::span<const double> grid, int consistency_sign, double alpha,
                               const ImageList& clean, double eta, const Replay& replay) {
  const Var condition = Var::constant(token.embedding);
  const std::vector<Var> leaves = as_leaves(perturbed, true);
  const ImageList recon_grad = gradients(reconstruction_loss(model, leaves, condition, schedule, replay), leaves);
  const ImageList consistency_grad = gradients(consistency(leaves), leaves);
  return ratio_search(perturbed, recon_grad, consistency_grad, grid, consistency_sign, alpha, clean, eta,
                      [&](const ImageList& trial) {
                        return reconstruction_loss_value(model, trial, token.embedding, schedule, replay);
                      });
}

nlohmann::json IterationRecord::to_json() const {
  nlohmann::json table = nlohmann::json::array();
  for (const auto& c : candidates) table.push_back({{"r", c.ratio}, {"recon_after", c.recon_after}});
  return {{"k", k},
          {"recon_loss", recon_loss},
          {"consistency_active", consistency_active},
          {"consistency_loss", consistency_loss},
          {"lambda", lambda},
          {"candidates", table}};
}

std::string IterationTrace::to_jsonl() const {
  std::string out;
  for (const auto& r : records) {
    out += r.to_json().dump();
    out += '\n';
  }
  return out;
}

IterationTrace IterationTrace::from_jsonl(const std::string& text) {
  IterationTrace trace;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    IterationRecord r;
    r.k = j.at("k").get<int>();
    r.recon_loss = j.at("recon_loss").get<double>();
    r.consistency_active = j.at("consistency_active").get<bool>();
    r.consistency_loss = j.at("consistency_loss").get<double>();
    r.lambda = j.at("lambda").get<double>();
    for (const auto& c : j.at("candidates")) {
      r.candidates.push_back({c.at("r").get<double>(), c.at("recon_after").get<double>()});
    }
    trace.records.push_back(std::move(r));
  }
  return trace;
}

ConsistencyFn make_consistency_fn(const AttackConfig& config, const FeatureExtractor& extractor) {
  switch (config.loss_variant) {
    case LossVariant::Style:
      return [&extractor, norm = config.gram_norm](const std::vector<Var>& images) {
        return consistency_loss(images, extractor, norm);
      };
    case LossVariant::Content: {
      const int tap = config.content_tap >= 0 ? config.content_tap : static_cast<int>(extractor.tap_count()) - 1;
      return [&extractor, tap](const std::vector<Var>& images) {
        return content_consistency_loss(images, extractor, tap);
      };
    }
    case LossVariant::None: break;
  }
  return {};
}

Denoiser alternating_surrogate_update(const Denoiser& model, const ImageList& images, const ConceptToken& token,
                                      const NoiseSchedule& schedule, int steps, double learning_rate,
                                      std::uint64_t seed) {
  if (steps < 0) throw std::invalid_argument("surrogate update: steps must be >= 0");
  Denoiser updated = model;
  if (steps == 0 || images.empty()) return updated;
  const Var condition = Var::constant(token.embedding);
  Adam optimizer(learning_rate);
  const auto params = updated.parameters().vars();
  for (int s = 0; s < steps; ++s) {
    Rng rng(derive_seed(seed, {0xA5B1u, static_cast<std::uint64_t>(s)}));
    std::vector<Var> terms;
    for (const Tensor& im : images) {
      terms.push_back(conditional_loss(updated, Var::constant(im), condition, schedule,
                                       draw_noise(rng, im.shape(), schedule)));
    }
    Var loss = ops::scale(ops::add_n(terms), 1.0 / static_cast<double>(images.size()));
    if (!std::isfinite(loss.value().item())) throw NumericalError("surrogate update diverged");
    optimizer.step(params, gradients(loss, params));
  }
  if (!updated.all_finite()) throw NumericalError("surrogate update produced non-finite parameters");
  return updated;
}

ProtectResult protect(const ImageSet& input, const AttackConfig& config, const Denoiser& surrogate,
                      const ConceptToken& token, const FeatureExtractor& extractor, const NoiseSchedule& schedule,
                      const IterationObserver& observer) {
  config.validate();
  token.validate();
  if (input.clean.empty()) throw std::invalid_argument("protect: empty image set");
  require_matching(input.clean, input.perturbed, "protect");

  ProtectResult result;
  result.images = input;
  result.images.eta = config.eta;
  ImageList& perturbed = result.images.perturbed;
  const ImageList& clean = result.images.clean;
  const Shape shape = clean.front().shape();
  const Var condition = Var::constant(token.embedding);
  const int start = config.resolved_start_step();
  const ConsistencyFn consistency = make_consistency_fn(config, extractor);

  Denoiser model = surrogate;
  for (int k = 1; k <= config.iterations; ++k) {
    const auto started = std::chrono::steady_clock::now();
    if (config.surrogate_mode == SurrogateMode::Alternating) {
      model = alternating_surrogate_update(model, perturbed, token, schedule, config.surrogate_steps,
                                           config.surrogate_learning_rate, derive_seed(config.seed, {0xA17u, static_cast<std::uint64_t>(k)}));
    }
    const Replay replay = make_replay(config.seed, k, perturbed.size(), shape, schedule);
    const Replay eval_replay = config.ratio_replay == RatioReplay::Shared
                                   ? replay
                                   : make_replay(config.seed, k, perturbed.size(), shape, schedule, 1);

    IterationRecord record;
    record.k = k;
    const std::vector<Var> leaves = as_leaves(perturbed, true);
    const Var recon = reconstruction_loss(model, leaves, condition, schedule, replay);
    record.recon_loss = recon.value().item();
    ImageList step_grad = gradients(recon, leaves);

    record.consistency_active = consistency && k >= start;
    if (record.consistency_active) {
      const Var cons = consistency(leaves);
      record.consistency_loss = cons.value().item();
      if (!std::isfinite(record.consistency_loss)) throw NumericalError("consistency loss is not finite");
      const ImageList cons_grad = gradients(cons, leaves);
      if (config.ratio_mode == RatioMode::Dynamic) {
        const auto search = ratio_search(
            perturbed, step_grad, cons_grad, config.ratio_grid, config.consistency_sign, config.alpha, clean,
            config.eta, [&](const ImageList& trial) {
              return reconstruction_loss_value(model, trial, token.embedding, schedule, eval_replay);
            });
        record.lambda = search.lambda;
        record.candidates = search.table;
      } else {
        record.lambda = config.static_ratio;
      }
      step_grad = combine_gradients(step_grad, cons_grad, config.consistency_sign * record.lambda);
    }

    if (observer) observer(IterationContext{k, perturbed, clean, replay, eval_replay, model, record});
    perturbed = pgd_step(perturbed, step_grad, config.alpha, clean, config.eta);
    record.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
    log_event(LogLevel::Debug, "attack.iteration", {{"k", k}, {"lambda", record.lambda}, {"wall_ms", record.wall_ms}});
    result.trace.records.push_back(std::move(record));
  }
  result.images.check_invariants();
  return result;
}

}  // namespace cap
