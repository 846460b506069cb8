#include "cap/personalization.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "cap/attack.hpp"
#include "cap/hashing.hpp"
#include "cap/ops.hpp"

namespace cap {

std::string to_string(TrainTarget t) {
  switch (t) {
    case TrainTarget::Denoiser: return "denoiser";
    case TrainTarget::Concept: return "concept";
    case TrainTarget::Both: return "both";
  }
  return "?";
}

TrainTarget train_target_from(const std::string& s) {
  if (s == "denoiser") return TrainTarget::Denoiser;
  if (s == "concept") return TrainTarget::Concept;
  if (s == "both") return TrainTarget::Both;
  throw std::invalid_argument("unknown training target: " + s);
}

PersonalizationConfig PersonalizationConfig::desk() { return {}; }

PersonalizationConfig PersonalizationConfig::paper() {
  PersonalizationConfig c;
  c.training_steps = 1000;
  c.learning_rate = 5e-7;
  c.batch_size = 2;
  return c;
}

void PersonalizationConfig::validate() const {
  if (training_steps < 0) throw std::invalid_argument("personalization: training_steps must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("personalization: batch_size must be >= 1");
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("personalization: learning_rate must be >= 0");
  if (!(concept_lr_scale >= 0.0)) throw std::invalid_argument("personalization: concept_lr_scale must be >= 0");
  if (eval_draws < 1) throw std::invalid_argument("personalization: eval_draws must be >= 1");
}

nlohmann::json PersonalizationConfig::to_json() const {
  return {{"training_steps", training_steps}, {"learning_rate", learning_rate},
          {"batch_size", batch_size},         {"what_to_train", to_string(what_to_train)},
          {"concept_lr_scale", concept_lr_scale}, {"eval_draws", eval_draws},
          {"seed", seed}};
}

PersonalizationConfig PersonalizationConfig::from_json(const nlohmann::json& j) {
  PersonalizationConfig c;
  c.training_steps = j.at("training_steps").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.what_to_train = train_target_from(j.at("what_to_train").get<std::string>());
  c.concept_lr_scale = j.at("concept_lr_scale").get<double>();
  c.eval_draws = j.at("eval_draws").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

Checkpoint LearnedConcept::to_checkpoint() const {
  Checkpoint ck = denoiser.to_checkpoint(schedule);
  ck.kind = "learned_concept";
  ck.meta["concept_identifier"] = token.identifier;
  ck.meta["provenance"] = provenance;
  ck.meta["image_shape"] = image_shape;
  ck.tensors.emplace_back("concept.embedding", token.embedding);
  return ck;
}

LearnedConcept LearnedConcept::from_checkpoint(const Checkpoint& checkpoint) {
  if (checkpoint.kind != "learned_concept") {
    throw std::runtime_error("checkpoint kind '" + checkpoint.kind + "' is not a learned concept");
  }
  NoiseSchedule schedule;
  Denoiser model = Denoiser::from_checkpoint(checkpoint, &schedule);
  LearnedConcept out{{checkpoint.meta.at("concept_identifier").get<std::string>(),
                      checkpoint.tensor("concept.embedding")},
                     std::move(model),
                     std::move(schedule),
                     checkpoint.meta.at("image_shape").get<Shape>(),
                     checkpoint.meta.at("provenance").get<std::string>(),
                     0.0,
                     0.0,
                     {}};
  return out;
}

nlohmann::json LearnedConcept::sidecar(const PersonalizationConfig& config) const {
  return {{"provenance", provenance},
          {"concept_identifier", token.identifier},
          {"config", config.to_json()},
          {"initial_loss", initial_loss},
          {"final_loss", final_loss}};
}

double evaluation_loss(const NoisePredictor& model, const ImageList& images, const Tensor& condition,
                       const NoiseSchedule& schedule, int draws, std::uint64_t seed) {
  if (images.empty()) throw std::invalid_argument("evaluation_loss: empty image set");
  NoGradGuard no_grad;
  const Var c = Var::constant(condition);
  double total = 0.0;
  for (int d = 0; d < draws; ++d) {
    for (std::size_t i = 0; i < images.size(); ++i) {
      Rng rng(derive_seed(seed, {0xE7A1u, static_cast<std::uint64_t>(d), i}));
      total += conditional_loss(model, Var::constant(images[i]), c, schedule,
                                draw_noise(rng, images[i].shape(), schedule))
                   .value()
                   .item();
    }
  }
  return total / static_cast<double>(draws * images.size());
}

LearnedConcept personalize(const Denoiser& base, const ConceptToken& initial, const NoiseSchedule& schedule,
                           const ImageList& images, const PersonalizationConfig& config) {
  config.validate();
  initial.validate();
  if (images.empty()) throw std::invalid_argument("personalize: empty image set");

  // Order by content so the batch stream is independent of input order.
  std::vector<std::string> hashes;
  for (const Tensor& im : images) {
    if (!im.all_finite()) throw std::invalid_argument("personalize: non-finite image");
    hashes.push_back(sha256_hex(im));
  }
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return hashes[a] < hashes[b]; });
  ImageList ordered;
  std::string provenance_text;
  for (std::size_t i : order) {
    ordered.push_back(images[i]);
    provenance_text += hashes[i];
  }
  provenance_text += config.to_json().dump();
  provenance_text += sha256_hex(initial.embedding);

  LearnedConcept out{initial, base, schedule, images.front().shape(), {}, 0.0, 0.0, {}};
  const std::uint64_t eval_seed = derive_seed(config.seed, {0xE7A1u});
  out.initial_loss = evaluation_loss(out.denoiser, ordered, out.token.embedding, schedule, config.eval_draws, eval_seed);

  const bool train_weights = config.what_to_train != TrainTarget::Concept;
  const bool train_concept = config.what_to_train != TrainTarget::Denoiser;
  Var concept_leaf(out.token.embedding, train_concept);
  std::vector<Var> weights;
  if (train_weights) {
    const auto vars = out.denoiser.parameters().vars();
    weights.assign(vars.begin(), vars.end());
  }
  Adam weight_opt(config.learning_rate);
  Adam concept_opt(config.learning_rate * config.concept_lr_scale);

  std::vector<Var> wrt = weights;
  if (train_concept) wrt.push_back(concept_leaf);

  for (int step = 0; step < config.training_steps; ++step) {
    Rng rng(derive_seed(config.seed, {0x7A11u, static_cast<std::uint64_t>(step)}));
    std::vector<Var> terms;
    for (int b = 0; b < config.batch_size; ++b) {
      const Tensor& im = ordered[rng.uniform_int(0, static_cast<int>(ordered.size()) - 1)];
      terms.push_back(conditional_loss(out.denoiser, Var::constant(im), concept_leaf, schedule,
                                       draw_noise(rng, im.shape(), schedule)));
    }
    Var loss = ops::scale(ops::add_n(terms), 1.0 / config.batch_size);
    const double value = loss.value().item();
    if (!std::isfinite(value)) {
      out.token.embedding = concept_leaf.value();
      throw TrainingDiverged("personalize: loss diverged at step " + std::to_string(step), std::move(out));
    }
    out.loss_curve.push_back(value);
    if (wrt.empty()) continue;
    std::vector<Tensor> grads = gradients(loss, wrt);
    for (const Tensor& g : grads) {
      if (!g.all_finite()) {
        out.token.embedding = concept_leaf.value();
        throw TrainingDiverged("personalize: non-finite gradient at step " + std::to_string(step), std::move(out));
      }
    }
    if (train_concept) {
      concept_opt.step(std::span<const Var>(&concept_leaf, 1), std::span<const Tensor>(&grads.back(), 1));
      grads.pop_back();
    }
    if (train_weights) weight_opt.step(weights, grads);
  }

  out.token.embedding = concept_leaf.value();
  if (!out.denoiser.all_finite() || !out.token.embedding.all_finite()) {
    throw NumericalError("personalize: parameters became non-finite");
  }
  out.final_loss = evaluation_loss(out.denoiser, ordered, out.token.embedding, schedule, config.eval_draws, eval_seed);
  out.provenance = sha256_hex(provenance_text);
  return out;
}

ImageList generate_from_concept(const LearnedConcept& learned, int count, std::uint64_t seed) {
  if (learned.image_shape.empty()) throw std::invalid_argument("generate_from_concept: unknown image shape");
  return generate(learned.denoiser, learned.token, learned.schedule, count, seed, learned.image_shape);
}

Denoiser pretrain_base(const DenoiserConfig& config, const NoiseSchedule& schedule, const ImageList& images,
                       PersonalizationConfig training) {
  training.what_to_train = TrainTarget::Denoiser;
  return personalize(Denoiser(config), ConceptToken::null(config.concept_dim), schedule, images, training).denoiser;
}

}  // namespace cap
