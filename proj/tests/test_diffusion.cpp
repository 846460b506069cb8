#include <doctest.h>

#include <cmath>

#include "cap/checkpoint.hpp"
#include "cap/diffusion.hpp"
#include "cap/ops.hpp"
#include "cap/parameters.hpp"
#include "test_support.hpp"

using namespace cap;
using namespace cap::testing;

TEST_CASE("schedule examples") {
  const NoiseSchedule one = make_schedule(1, 0.1, 0.1);
  REQUIRE(one.steps() == 1);
  CHECK(one.beta(1) == doctest::Approx(0.1));
  CHECK(one.alpha_bar(1) == doctest::Approx(0.9));

  const NoiseSchedule two = make_schedule(2, 0.1, 0.2);
  CHECK(two.beta(2) == doctest::Approx(0.2));
  CHECK(two.alpha_bar(1) == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(two.alpha_bar(2) == doctest::Approx(0.9 * 0.8).epsilon(1e-12));
}

TEST_CASE("long schedule decreases to near zero") {
  const NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  double product = 1.0;
  for (int t = 1; t <= 1000; ++t) {
    const double beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / 999.0;
    product *= 1.0 - beta;
    CHECK(s.beta(t) > 0.0);
    CHECK(s.beta(t) < 1.0);
    CHECK(std::abs(s.alpha_bar(t) - product) <= 1e-12 * product);
    if (t > 1) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
  }
  CHECK(s.alpha_bar(1000) < 1e-2);
}

TEST_CASE("schedule rejects bad endpoints") {
  CHECK_THROWS_AS(make_schedule(0, 1e-4, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.03, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 1e-4, 1.0), std::invalid_argument);
  CHECK_THROWS(default_schedule().check_timestep(0));
  CHECK_THROWS(default_schedule().check_timestep(101));
}

TEST_CASE("forward noise examples") {
  const Tensor x0({3, 2, 2}, 0.5);
  const Tensor eps({3, 2, 2}, 1.0);
  const Tensor clean = noise_with_alpha_bar(x0, 1.0, eps);
  const Tensor pure = noise_with_alpha_bar(x0, 0.0, eps);
  const Tensor mixed = noise_with_alpha_bar(x0, 0.64, eps);
  for (double v : clean.values()) CHECK(v == 0.5);
  for (double v : pure.values()) CHECK(v == 1.0);
  for (double v : mixed.values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));

  const NoiseSchedule s = default_schedule();
  CHECK_THROWS_AS(forward_noise(x0, 1, Tensor({3, 2, 1}), s), std::invalid_argument);
  CHECK_THROWS(forward_noise(x0, 0, eps, s));
  CHECK_THROWS(forward_noise(x0, s.steps() + 1, eps, s));
}

TEST_CASE("forward noise moments") {
  const NoiseSchedule s = default_schedule();
  const int t = 40;
  const double ab = s.alpha_bar(t);
  const Tensor x0({1, 2, 2}, 0.7);
  Rng rng(3);
  const int n = 20000;
  std::vector<double> sum(4, 0.0), sq(4, 0.0);
  for (int i = 0; i < n; ++i) {
    const Tensor xt = forward_noise(x0, t, rng.normal_tensor(x0.shape()), s);
    for (int j = 0; j < 4; ++j) {
      sum[j] += xt[j];
      sq[j] += xt[j] * xt[j];
    }
  }
  for (int j = 0; j < 4; ++j) {
    const double mean = sum[j] / n;
    const double var = sq[j] / n - mean * mean;
    const double se = std::sqrt((1.0 - ab) / n);
    CHECK(std::abs(mean - std::sqrt(ab) * 0.7) < 3.0 * se);
    CHECK(std::abs(var - (1.0 - ab)) < 0.05 * (1.0 - ab));
  }
}

TEST_CASE("loss examples with stub predictors") {
  const NoiseSchedule s = default_schedule();
  const Var x0 = Var::constant(Tensor({3, 4, 4}, 0.3));
  const Var c = Var::constant(Tensor(Shape{1}));
  const NoiseDraw ones{17, Tensor({3, 4, 4}, 1.0)};

  const ConstantPredictor echo(ones.eps);
  CHECK(conditional_loss(echo, x0, c, s, ones).value().item() == 0.0);
  CHECK(unconditional_loss(echo, x0, s, ones).value().item() == 0.0);

  const ConstantPredictor zero(Tensor({3, 4, 4}));
  CHECK(conditional_loss(zero, x0, c, s, ones).value().item() == doctest::Approx(1.0));
  CHECK(unconditional_loss(zero, x0, s, ones).value().item() == doctest::Approx(1.0));
}

TEST_CASE("seeded loss is deterministic and matches its null-condition twin") {
  const Denoiser model(tiny_denoiser());
  const NoiseSchedule s = default_schedule();
  Rng rng(5);
  const Var x0 = Var::constant(random_image(rng, 3, 8, 8));
  const Var null = Var::constant(Tensor(Shape{model.concept_dim()}));
  const double a = conditional_loss(model, x0, null, s, 99).value().item();
  const double b = conditional_loss(model, x0, null, s, 99).value().item();
  CHECK(a == b);
  CHECK(a >= 0.0);
  CHECK(unconditional_loss(model, x0, s, 99).value().item() == a);
  const Var other = Var::constant(ConceptToken::random("sks", model.concept_dim(), 1).embedding);
  CHECK(conditional_loss(model, x0, other, s, 99).value().item() != a);
}

TEST_CASE("conditional loss gradient wrt the image matches finite differences") {
  const Denoiser model(tiny_denoiser());
  const NoiseSchedule s = default_schedule();
  Rng rng(8);
  const Tensor x0 = random_image(rng, 3, 8, 8);
  const NoiseDraw draw = draw_noise(rng, x0.shape(), s);
  const Var c = Var::constant(ConceptToken::random("sks", model.concept_dim(), 2).embedding);
  const double err = gradient_error([&](const Var& x) { return conditional_loss(model, x, c, s, draw); }, x0);
  CHECK(err < 1e-3);
}

TEST_CASE("conditional loss gradient wrt parameters and concept") {
  const Denoiser model(tiny_denoiser());
  const NoiseSchedule s = default_schedule();
  Rng rng(9);
  const Var x0 = Var::constant(random_image(rng, 3, 8, 8));
  const NoiseDraw draw = draw_noise(rng, x0.shape(), s);
  const Tensor emb = ConceptToken::random("sks", model.concept_dim(), 4).embedding;
  CHECK(gradient_error([&](const Var& c) { return conditional_loss(model, x0, c, s, draw); }, emb) < 1e-3);

  const Var cond = Var::constant(emb);
  Denoiser probe = model;
  Var bias = probe.parameters().get("out.b");
  const Tensor analytic = gradient(conditional_loss(probe, x0, cond, s, draw), bias);
  const Tensor numeric = finite_difference(
      [&](const Tensor& b) {
        bias.mutable_value() = b;
        NoGradGuard ng;
        return conditional_loss(probe, x0, cond, s, draw).value().item();
      },
      bias.value(), 1e-4);
  CHECK(relative_error(analytic, numeric) < 1e-3);

  // Parameters are leaves; their gradient must be finite and non-zero.
  const Var loss = conditional_loss(model, x0, cond, s, draw);
  const auto grads = gradients(loss, model.parameters().vars());
  double norm = 0.0;
  for (const auto& g : grads) {
    CHECK(g.all_finite());
    norm += g.max_abs();
  }
  CHECK(norm > 0.0);
}

TEST_CASE("denoiser preserves shape and size limit") {
  const Denoiser full;
  CHECK(full.parameters().scalar_count() <= 1'000'000);
  const Denoiser model(tiny_denoiser());
  const Var x = Var::constant(Tensor({3, 16, 8}, 0.2));
  const Var c = Var::constant(Tensor(Shape{model.concept_dim()}));
  CHECK(model.predict(x, 10, c).shape() == x.shape());
  CHECK_THROWS(model.predict(Var::constant(Tensor({3, 6, 8})), 10, c));
}

TEST_CASE("generation is deterministic, finite and clamped") {
  const Denoiser model(tiny_denoiser());
  const NoiseSchedule s = make_schedule(20, 1e-3, 0.2);
  const ConceptToken token = ConceptToken::random("sks", model.concept_dim(), 3);
  const ImageList a = generate(model, token, s, 16, 11, {3, 8, 8});
  const ImageList b = generate(model, token, s, 1, 11, {3, 8, 8});
  REQUIRE(a.size() == 16);
  CHECK(a[0].values()[0] == b[0].values()[0]);
  CHECK(std::equal(a[0].values().begin(), a[0].values().end(), b[0].values().begin()));
  for (const Tensor& im : a) {
    CHECK(im.all_finite());
    for (double v : im.values()) CHECK((v >= 0.0 && v <= 1.0));
  }
  CHECK_THROWS(generate(model, token, s, 0, 1, {3, 8, 8}));
  Denoiser broken = model;
  Var handle = broken.parameters().get("out.b");
  handle.mutable_value()[0] = std::nan("");
  CHECK_THROWS(generate(broken, token, s, 1, 1, {3, 8, 8}));
}

TEST_CASE("denoiser checkpoint round trip") {
  const Denoiser model(tiny_denoiser(21));
  const NoiseSchedule s = make_schedule(50, 1e-4, 0.02);
  const auto path = std::filesystem::temp_directory_path() / "cap_test_denoiser.ckpt";
  save_checkpoint(path, model.to_checkpoint(s));
  NoiseSchedule loaded_schedule;
  const Denoiser loaded = Denoiser::from_checkpoint(load_checkpoint(path), &loaded_schedule);
  std::filesystem::remove(path);
  CHECK(loaded_schedule.steps() == 50);
  CHECK(loaded_schedule.alpha_bar(50) == doctest::Approx(s.alpha_bar(50)));
  const auto& a = model.parameters();
  const auto& b = loaded.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    Tensor expect = a[i].value();
    round_to_float32(expect);
    CHECK(expect.shape() == b[i].value().shape());
    CHECK(std::equal(expect.values().begin(), expect.values().end(), b[i].value().values().begin()));
  }
}

TEST_CASE("concept tokens validate") {
  CHECK_THROWS(ConceptToken{"", Tensor(Shape{4})}.validate());
  Tensor bad(Shape{2});
  bad[1] = std::numeric_limits<double>::infinity();
  CHECK_THROWS(ConceptToken{"sks", bad}.validate());
  CHECK_NOTHROW(ConceptToken::random("sks", 4, 1).validate());
}
