#include "cap/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cap/ops.hpp"

namespace cap {

void NoiseSchedule::check_timestep(int t) const {
  if (t < 1 || t > steps()) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
  }
}

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("make_schedule: need at least one timestep");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || !(beta_start <= beta_end)) {
    throw std::invalid_argument("make_schedule: require 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.betas.resize(steps);
  s.alphas.resize(steps);
  s.alpha_bars.resize(steps);
  double running = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    s.betas[i] = beta_start + frac * (beta_end - beta_start);
    s.alphas[i] = 1.0 - s.betas[i];
    running *= s.alphas[i];
    s.alpha_bars[i] = running;
  }
  return s;
}

Tensor noise_with_alpha_bar(const Tensor& x0, double alpha_bar, const Tensor& eps) {
  require_same_shape(x0, eps, "forward_noise");
  if (!(alpha_bar >= 0.0 && alpha_bar <= 1.0)) throw std::invalid_argument("forward_noise: alpha_bar outside [0, 1]");
  const double a = std::sqrt(alpha_bar);
  const double b = std::sqrt(1.0 - alpha_bar);
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
  schedule.check_timestep(t);
  return noise_with_alpha_bar(x0, schedule.alpha_bar(t), eps);
}

Var forward_noise(const Var& x0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
  schedule.check_timestep(t);
  require_same_shape(x0.value(), eps, "forward_noise");
  const double ab = schedule.alpha_bar(t);
  return ops::add_constant(ops::scale(x0, std::sqrt(ab)), eps * std::sqrt(1.0 - ab));
}

void ConceptToken::validate() const {
  if (identifier.empty()) throw std::invalid_argument("concept identifier must be non-empty");
  if (embedding.rank() != 1 || embedding.empty()) throw std::invalid_argument("concept embedding must be a vector");
  if (!embedding.all_finite()) throw std::invalid_argument("concept embedding is not finite");
}

ConceptToken ConceptToken::random(std::string identifier, int dim, std::uint64_t seed, double scale) {
  Rng rng(derive_seed(seed, {0xC0C3u}));
  return {std::move(identifier), rng.normal_tensor(Shape{dim}, scale)};
}

NoiseDraw draw_noise(Rng& rng, const Shape& shape, const NoiseSchedule& schedule) {
  NoiseDraw d;
  d.t = rng.uniform_int(1, schedule.steps());
  d.eps = rng.normal_tensor(shape);
  return d;
}

Var conditional_loss(const NoisePredictor& model, const Var& x0, const Var& condition,
                     const NoiseSchedule& schedule, const NoiseDraw& draw) {
  if (!x0.value().all_finite()) throw std::invalid_argument("conditional_loss: non-finite image");
  if (!condition.value().all_finite()) throw std::invalid_argument("conditional_loss: non-finite concept");
  Var noisy = forward_noise(x0, draw.t, draw.eps, schedule);
  Var predicted = model.predict(noisy, draw.t, condition);
  require_same_shape(predicted.value(), draw.eps, "conditional_loss: prediction");
  return ops::mse(predicted, Var::constant(draw.eps));
}

Var conditional_loss(const NoisePredictor& model, const Var& x0, const Var& condition,
                     const NoiseSchedule& schedule, std::uint64_t seed) {
  Rng rng(seed);
  return conditional_loss(model, x0, condition, schedule, draw_noise(rng, x0.shape(), schedule));
}

Var unconditional_loss(const NoisePredictor& model, const Var& x0, const NoiseSchedule& schedule,
                       const NoiseDraw& draw) {
  return conditional_loss(model, x0, Var::constant(Tensor(Shape{model.concept_dim()})), schedule, draw);
}

Var unconditional_loss(const NoisePredictor& model, const Var& x0, const NoiseSchedule& schedule,
                       std::uint64_t seed) {
  return conditional_loss(model, x0, Var::constant(Tensor(Shape{model.concept_dim()})), schedule, seed);
}

nlohmann::json DenoiserConfig::to_json() const {
  return {{"image_channels", image_channels}, {"level_channels", level_channels},
          {"mid_channels", mid_channels},     {"time_dim", time_dim},
          {"embed_dim", embed_dim},           {"concept_dim", concept_dim},
          {"init_seed", init_seed}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.image_channels = j.at("image_channels").get<int>();
  c.level_channels = j.at("level_channels").get<std::vector<int>>();
  c.mid_channels = j.at("mid_channels").get<int>();
  c.time_dim = j.at("time_dim").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.concept_dim = j.at("concept_dim").get<int>();
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  return c;
}

Tensor timestep_embedding(int t, int dim) {
  Tensor e(Shape{dim});
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half));
    e[i] = std::sin(t * freq);
    e[half + i] = std::cos(t * freq);
  }
  return e;
}

Denoiser::Denoiser(DenoiserConfig config) : config_(std::move(config)) {
  if (config_.level_channels.empty()) throw std::invalid_argument("Denoiser: need at least one level");
  if (config_.time_dim < 2 || config_.time_dim % 2) throw std::invalid_argument("Denoiser: time_dim must be even");
  Rng rng(config_.init_seed);
  const int e = config_.embed_dim;
  const auto& ch = config_.level_channels;

  params_.add("time.w1", fan_in_uniform({e, config_.time_dim}, rng));
  params_.add("time.b1", Tensor(Shape{e}));
  params_.add("time.w2", fan_in_uniform({e, e}, rng));
  params_.add("time.b2", Tensor(Shape{e}));
  params_.add("concept.w", fan_in_uniform({e, config_.concept_dim}, rng));
  params_.add("concept.b", Tensor(Shape{e}));
  params_.add("in.w", fan_in_uniform({ch[0], config_.image_channels, 3, 3}, rng));
  params_.add("in.b", Tensor(Shape{ch[0]}));

  for (std::size_t i = 0; i < ch.size(); ++i) {
    add_block("down" + std::to_string(i), i == 0 ? ch[0] : ch[i - 1], ch[i], rng);
  }
  add_block("mid", ch.back(), config_.mid_channels, rng);
  for (std::size_t i = ch.size(); i-- > 0;) {
    const int below = i + 1 == ch.size() ? config_.mid_channels : ch[i + 1];
    add_block("up" + std::to_string(i), below + ch[i], ch[i], rng);
  }
  params_.add("out.w", fan_in_uniform({config_.image_channels, ch[0], 3, 3}, rng, 0.1));
  params_.add("out.b", Tensor(Shape{config_.image_channels}));
}

void Denoiser::add_block(const std::string& prefix, int in_ch, int out_ch, Rng& rng) {
  params_.add(prefix + ".conv1.w", fan_in_uniform({out_ch, in_ch, 3, 3}, rng));
  params_.add(prefix + ".conv1.b", Tensor(Shape{out_ch}));
  params_.add(prefix + ".emb.w", fan_in_uniform({out_ch, config_.embed_dim}, rng, 0.5));
  params_.add(prefix + ".emb.b", Tensor(Shape{out_ch}));
  params_.add(prefix + ".conv2.w", fan_in_uniform({out_ch, out_ch, 3, 3}, rng, 0.3));
  params_.add(prefix + ".conv2.b", Tensor(Shape{out_ch}));
  if (in_ch != out_ch) params_.add(prefix + ".skip.w", fan_in_uniform({out_ch, in_ch, 1, 1}, rng));
}

Var Denoiser::run_block(const std::string& prefix, const Var& h, const Var& emb) const {
  Var r = ops::conv2d(ops::silu(h), p(prefix + ".conv1.w"), p(prefix + ".conv1.b"), 1);
  r = ops::add_channel(r, ops::linear(emb, p(prefix + ".emb.w"), p(prefix + ".emb.b")));
  r = ops::conv2d(ops::silu(r), p(prefix + ".conv2.w"), p(prefix + ".conv2.b"), 1);
  const int in_ch = h.shape()[0];
  const int out_ch = r.shape()[0];
  Var skip = in_ch == out_ch ? h : ops::conv2d(h, p(prefix + ".skip.w"), Var(), 0);
  return ops::add(r, skip);
}

Var Denoiser::predict(const Var& x_t, int t, const Var& condition) const {
  const Shape& s = x_t.shape();
  const int mult = config_.spatial_multiple();
  if (s.size() != 3 || s[0] != config_.image_channels || s[1] % mult || s[2] % mult || s[1] == 0 || s[2] == 0) {
    throw std::invalid_argument("Denoiser: input " + shape_str(s) + " must be {" +
                                std::to_string(config_.image_channels) + ", H, W} with H, W multiples of " +
                                std::to_string(mult));
  }
  if (condition.value().rank() != 1 || condition.shape()[0] != config_.concept_dim) {
    throw std::invalid_argument("Denoiser: condition embedding must have " + std::to_string(config_.concept_dim) +
                                " entries");
  }

  Var temb = Var::constant(timestep_embedding(t, config_.time_dim));
  Var e = ops::linear(temb, p("time.w1"), p("time.b1"));
  e = ops::linear(ops::silu(e), p("time.w2"), p("time.b2"));
  e = ops::add(e, ops::linear(condition, p("concept.w"), p("concept.b")));
  e = ops::silu(e);

  const std::size_t levels = config_.level_channels.size();
  Var h = ops::conv2d(x_t, p("in.w"), p("in.b"), 1);
  std::vector<Var> skips;
  skips.reserve(levels);
  for (std::size_t i = 0; i < levels; ++i) {
    h = run_block("down" + std::to_string(i), h, e);
    skips.push_back(h);
    h = ops::avg_pool2(h);
  }
  h = run_block("mid", h, e);
  for (std::size_t i = levels; i-- > 0;) {
    h = ops::concat_channels(ops::upsample2(h), skips[i]);
    h = run_block("up" + std::to_string(i), h, e);
  }
  return ops::conv2d(ops::silu(h), p("out.w"), p("out.b"), 1);
}

Checkpoint Denoiser::to_checkpoint(const NoiseSchedule& schedule) const {
  Checkpoint ck;
  ck.kind = "denoiser";
  ck.meta["denoiser_config"] = config_.to_json();
  ck.meta["schedule"] = {{"steps", schedule.steps()},
                         {"beta_start", schedule.beta_start},
                         {"beta_end", schedule.beta_end}};
  for (std::size_t i = 0; i < params_.size(); ++i) ck.tensors.emplace_back(params_.names()[i], params_[i].value());
  return ck;
}

Denoiser Denoiser::from_checkpoint(const Checkpoint& checkpoint, NoiseSchedule* schedule) {
  if (checkpoint.kind != "denoiser" && checkpoint.kind != "learned_concept") {
    throw std::runtime_error("checkpoint kind '" + checkpoint.kind + "' does not hold a denoiser");
  }
  Denoiser model(DenoiserConfig::from_json(checkpoint.meta.at("denoiser_config")));
  std::vector<Tensor> values;
  for (const auto& name : model.params_.names()) values.push_back(checkpoint.tensor(name));
  model.params_.assign(values);
  if (schedule) {
    const auto& s = checkpoint.meta.at("schedule");
    *schedule = make_schedule(s.at("steps").get<int>(), s.at("beta_start").get<double>(),
                              s.at("beta_end").get<double>());
  }
  return model;
}

ImageList generate(const Denoiser& model, const ConceptToken& token, const NoiseSchedule& schedule,
                   int count, std::uint64_t seed, const Shape& image_shape) {
  if (count < 1) throw std::invalid_argument("generate: count must be >= 1");
  if (!model.all_finite()) throw std::runtime_error("generate: denoiser parameters are not finite");
  token.validate();
  NoGradGuard no_grad;
  const Var c = Var::constant(token.embedding);
  ImageList out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(i)}));
    Tensor x = rng.normal_tensor(image_shape);
    for (int t = schedule.steps(); t >= 1; --t) {
      const Tensor eps = model.predict(Var::constant(x), t, c).value();
      const double ab = schedule.alpha_bar(t);
      const double coef = schedule.beta(t) / std::sqrt(1.0 - ab);
      const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha(t));
      for (std::size_t j = 0; j < x.size(); ++j) x[j] = inv_sqrt_alpha * (x[j] - coef * eps[j]);
      if (t > 1) {
        const double ab_prev = schedule.alpha_bar(t - 1);
        const double sigma = std::sqrt(schedule.beta(t) * (1.0 - ab_prev) / (1.0 - ab));
        for (double& v : x.values()) v += sigma * rng.normal();
      }
    }
    if (!x.all_finite()) throw std::runtime_error("generate: sampler diverged");
    for (double& v : x.values()) v = std::clamp(v, 0.0, 1.0);
    out.push_back(std::move(x));
  }
  return out;
}

}  // namespace cap
