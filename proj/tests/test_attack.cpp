#include <doctest.h>

#include <cmath>

#include "cap/attack.hpp"
#include "cap/ops.hpp"
#include "test_support.hpp"

using namespace cap;
using namespace cap::testing;

namespace {

struct Toy {
  Denoiser model{tiny_denoiser(3)};
  NoiseSchedule schedule = default_schedule();
  FeatureExtractor extractor{narrow_vgg()};
  ConceptToken token = ConceptToken::random("sks", 4, 5);
  ImageSet images;

  explicit Toy(std::uint64_t seed, int n = 4, int size = 8) {
    Rng rng(seed);
    ImageList clean;
    for (int i = 0; i < n; ++i) clean.push_back(random_image(rng, 3, size, size, 0.1, 0.9));
    images = ImageSet::from_clean(std::move(clean), 0.05, "toy");
  }
};

ImageList sign_step(const ImageList& x, const ImageList& g, double alpha, const ImageList& clean, double eta) {
  ImageList out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = 0; j < x[i].size(); ++j) {
      const double s = (g[i][j] > 0) - (g[i][j] < 0);
      double v = x[i][j] + alpha * s;
      v = std::min(std::max(v, clean[i][j] - eta), clean[i][j] + eta);
      out[i][j] = std::min(std::max(v, 0.0), 1.0);
    }
  }
  return out;
}

bool same_images(const ImageList& a, const ImageList& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::equal(a[i].values().begin(), a[i].values().end(), b[i].values().begin(), b[i].values().end())) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("reconstruction loss sums per-image losses") {
  const EchoInput echo;
  const NoiseSchedule s = default_schedule();
  const double ab = s.alpha_bar(1);
  const std::vector<Var> images{Var::constant(Tensor({1, 2, 2}, std::sqrt(0.3 / ab))),
                                Var::constant(Tensor({1, 2, 2}, std::sqrt(0.7 / ab)))};
  const Replay replay{{NoiseDraw{1, Tensor({1, 2, 2})}, NoiseDraw{1, Tensor({1, 2, 2})}}};
  const Var c = Var::constant(Tensor(Shape{1}));
  CHECK(reconstruction_loss(echo, images, c, s, replay).value().item() == doctest::Approx(1.0).epsilon(1e-12));

  const ConstantPredictor exact(Tensor({1, 2, 2}));
  CHECK(reconstruction_loss(exact, {images[0]}, c, s, Replay{{replay.draws[0]}}).value().item() == 0.0);
  CHECK_THROWS(reconstruction_loss(exact, images, c, s, Replay{{replay.draws[0]}}));

  Toy toy(1);
  const Replay r1 = make_replay(9, 2, 4, {3, 8, 8}, toy.schedule);
  const Replay r2 = make_replay(9, 2, 4, {3, 8, 8}, toy.schedule);
  CHECK(reconstruction_loss_value(toy.model, toy.images.clean, toy.token.embedding, toy.schedule, r1) ==
        reconstruction_loss_value(toy.model, toy.images.clean, toy.token.embedding, toy.schedule, r2));
}

TEST_CASE("pgd step examples") {
  const ImageList clean{Tensor({1, 1, 3}, 0.5)};
  ImageList x{Tensor({1, 1, 3}, std::vector<double>{0.5, 0.548, 0.5})};
  const ImageList g{Tensor({1, 1, 3}, std::vector<double>{1.0, 2.0, 0.0})};
  const ImageList out = pgd_step(x, g, 0.005, clean, 0.05);
  CHECK(out[0][0] == doctest::Approx(0.505).epsilon(1e-15));
  CHECK(out[0][1] == doctest::Approx(0.55).epsilon(1e-15));
  CHECK(out[0][2] == 0.5);

  const ImageList edge{Tensor({1, 1, 2}, std::vector<double>{0.01, 0.99})};
  const ImageList clipped =
      pgd_step(edge, {Tensor({1, 1, 2}, std::vector<double>{-1.0, 1.0})}, 0.05, edge, 0.05);
  CHECK(clipped[0][0] == 0.0);
  CHECK(clipped[0][1] == 1.0);

  ImageList bad = g;
  bad[0][1] = std::nan("");
  CHECK_THROWS_AS(pgd_step(x, bad, 0.005, clean, 0.05), NumericalError);
  CHECK_THROWS_AS(pgd_step(x, {Tensor({1, 1, 2})}, 0.005, clean, 0.05), std::invalid_argument);
}

TEST_CASE("repeated consistent steps saturate exactly at the budget") {
  Rng rng(3);
  const ImageList clean{random_image(rng, 3, 4, 4, 0.2, 0.8)};
  Tensor dir = rng.normal_tensor({3, 4, 4});
  const double alpha = 0.004, eta = 0.03;
  ImageList x = clean;
  for (int k = 0; k < 12; ++k) x = pgd_step(x, {dir}, alpha, clean, eta);
  for (std::size_t j = 0; j < dir.size(); ++j) {
    const double expect = clean[0][j] + (dir[j] > 0 ? eta : -eta);
    CHECK(x[0][j] == doctest::Approx(expect).epsilon(1e-15));
    CHECK(std::abs(x[0][j] - clean[0][j]) <= eta + 1e-12);
  }
}

TEST_CASE("ratio search stubs") {
  const ImageList clean{Tensor({1, 1, 1}, 0.5)};
  const ImageList zero{Tensor({1, 1, 1})};
  const ImageList up{Tensor({1, 1, 1}, 1.0)};
  const std::vector<double> grid{0.0, 10.0};
  const auto moved = [&](const ImageList& trial) { return trial[0][0] > 0.5 ? 0.7 : 0.5; };
  const RatioSearchResult a = ratio_search(clean, zero, up, grid, 1, 0.005, clean, 0.05, moved);
  CHECK(a.lambda == 10.0);
  REQUIRE(a.table.size() == 2);
  CHECK(a.table[0].recon_after == 0.5);
  CHECK(a.table[1].recon_after == 0.7);

  const std::vector<double> wide{0.0, 20.0, 40.0, 60.0};
  const RatioSearchResult tie = ratio_search(clean, zero, up, wide, -1, 0.005, clean, 0.05,
                                             [](const ImageList&) { return 1.25; });
  CHECK(tie.lambda == 0.0);
  CHECK_THROWS(ratio_search(clean, zero, up, std::vector<double>{}, 1, 0.005, clean, 0.05, moved));
}

TEST_CASE("ratio search matches a brute-force loop over an 11-point grid") {
  for (int sign : {-1, 1}) {
    Toy toy(40 + sign);
    const auto grid = linear_ratio_grid(100.0, 11);
    const Replay replay = make_replay(3, 1, toy.images.size(), {3, 8, 8}, toy.schedule);
    ImageList start = pgd_step(toy.images.clean,
                               {Tensor({3, 8, 8}, 1.0), Tensor({3, 8, 8}, -1.0), Tensor({3, 8, 8}, 1.0),
                                Tensor({3, 8, 8}, -1.0)},
                               0.02, toy.images.clean, 0.05);
    const auto cons = [&](const std::vector<Var>& xs) { return consistency_loss(xs, toy.extractor); };
    const RatioSearchResult got = ratio_search(start, toy.model, toy.token, toy.schedule, cons, grid, sign, 0.005,
                                               toy.images.clean, 0.05, replay);

    double best = -1.0, best_r = -1.0;
    for (double r : grid) {
      std::vector<Var> leaves;
      for (const auto& im : start) leaves.emplace_back(im, true);
      const Var total = ops::add(
          reconstruction_loss(toy.model, leaves, Var::constant(toy.token.embedding), toy.schedule, replay),
          ops::scale(consistency_loss(leaves, toy.extractor), sign * r));
      const ImageList trial = sign_step(start, gradients(total, leaves), 0.005, toy.images.clean, 0.05);
      const double value =
          reconstruction_loss_value(toy.model, trial, toy.token.embedding, toy.schedule, replay);
      if (value > best) {
        best = value;
        best_r = r;
      }
    }
    CHECK(got.lambda == best_r);
    REQUIRE(got.table.size() == grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) CHECK(got.table[i].ratio == grid[i]);
  }
}

TEST_CASE("attack config validation and serialisation") {
  AttackConfig c;
  c.iterations = 5;
  CHECK(c.resolved_start_step() == 3);
  c.iterations = 20;
  CHECK(c.resolved_start_step() == 10);
  CHECK(c.ratio_grid.size() == 11);
  CHECK(c.ratio_grid.front() == 0.0);
  CHECK(c.ratio_grid.back() == 100.0);
  CHECK(c.alpha == 0.005);
  CHECK(c.eta == 0.05);
  CHECK(c.consistency_sign == -1);

  const AttackConfig back = AttackConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());

  AttackConfig bad = c;
  bad.ratio_grid = {10.0, 20.0};
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.start_step = 21;
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.alpha = 0.0;
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.consistency_sign = 0;
  CHECK_THROWS(bad.validate());
  CHECK_THROWS(loss_variant_from("texture"));
}

TEST_CASE("protect with no iterations is the identity") {
  Toy toy(2);
  AttackConfig c;
  c.iterations = 0;
  c.loss_variant = LossVariant::None;
  const ProtectResult r = protect(toy.images, c, toy.model, toy.token, toy.extractor, toy.schedule);
  CHECK(same_images(r.images.perturbed, toy.images.clean));
  CHECK(r.trace.records.empty());
}

TEST_CASE("consistency activates at the start step with a full candidate table") {
  Toy toy(3);
  AttackConfig c;
  c.iterations = 4;
  c.start_step = 3;
  const ProtectResult r = protect(toy.images, c, toy.model, toy.token, toy.extractor, toy.schedule);
  REQUIRE(r.trace.records.size() == 4);
  for (const auto& rec : r.trace.records) {
    CHECK(rec.consistency_active == (rec.k >= 3));
    CHECK(rec.candidates.size() == (rec.k >= 3 ? c.ratio_grid.size() : 0u));
    if (rec.k >= 3) {
      CHECK(std::find(c.ratio_grid.begin(), c.ratio_grid.end(), rec.lambda) != c.ratio_grid.end());
    }
  }
  const IterationTrace back = IterationTrace::from_jsonl(r.trace.to_jsonl());
  CHECK(back.to_jsonl() == r.trace.to_jsonl());
}

TEST_CASE("committed ratios are the argmax under the candidate-scoring replay") {
  for (RatioReplay mode : {RatioReplay::Shared, RatioReplay::Heldout}) {
    Toy toy(12);
    AttackConfig c;
    c.iterations = 4;
    c.seed = 21;
    c.ratio_replay = mode;
    int checked = 0;
    const auto observer = [&](const IterationContext& ctx) {
      const bool shared = std::equal(ctx.replay.draws[0].eps.values().begin(), ctx.replay.draws[0].eps.values().end(),
                                     ctx.eval_replay.draws[0].eps.values().begin());
      CHECK(shared == (mode == RatioReplay::Shared));
      if (!ctx.record.consistency_active) return;
      double best = -1.0, best_r = -1.0;
      for (double r : c.ratio_grid) {
        std::vector<Var> leaves;
        for (const auto& im : ctx.perturbed) leaves.emplace_back(im, true);
        const Var total = ops::add(
            reconstruction_loss(ctx.surrogate, leaves, Var::constant(toy.token.embedding), toy.schedule, ctx.replay),
            ops::scale(consistency_loss(leaves, toy.extractor), c.consistency_sign * r));
        const ImageList trial = sign_step(ctx.perturbed, gradients(total, leaves), c.alpha, ctx.clean, c.eta);
        const double value =
            reconstruction_loss_value(ctx.surrogate, trial, toy.token.embedding, toy.schedule, ctx.eval_replay);
        if (value > best) {
          best = value;
          best_r = r;
        }
      }
      CHECK(ctx.record.lambda == best_r);
      ++checked;
    };
    protect(toy.images, c, toy.model, toy.token, toy.extractor, toy.schedule, observer);
    CHECK(checked == 3);
  }
  CHECK(ratio_replay_from(to_string(RatioReplay::Shared)) == RatioReplay::Shared);
  CHECK_THROWS(ratio_replay_from("fresh"));
}

TEST_CASE("protect ascends the reconstruction loss under fixed replay noise") {
  Toy toy(4);
  AttackConfig c;
  c.iterations = 20;
  c.seed = 17;
  const ProtectResult r = protect(toy.images, c, toy.model, toy.token, toy.extractor, toy.schedule);
  const Replay fixed = make_replay(99, 0, 4, {3, 8, 8}, toy.schedule);
  const double before = reconstruction_loss_value(toy.model, toy.images.clean, toy.token.embedding, toy.schedule, fixed);
  const double after = reconstruction_loss_value(toy.model, r.images.perturbed, toy.token.embedding, toy.schedule, fixed);
  CHECK(after > before);
  CHECK(r.images.max_perturbation() <= 0.05 + 1e-7);
  CHECK_NOTHROW(r.images.check_invariants());
}

TEST_CASE("protect is bit-reproducible") {
  Toy toy(5);
  AttackConfig c;
  c.iterations = 6;
  c.seed = 3;
  const ProtectResult a = protect(toy.images, c, toy.model, toy.token, toy.extractor, toy.schedule);
  const ProtectResult b = protect(toy.images, c, toy.model, toy.token, toy.extractor, toy.schedule);
  CHECK(same_images(a.images.perturbed, b.images.perturbed));
  c.seed = 4;
  const ProtectResult d = protect(toy.images, c, toy.model, toy.token, toy.extractor, toy.schedule);
  CHECK_FALSE(same_images(a.images.perturbed, d.images.perturbed));
}

TEST_CASE("baseline containment: no consistency equals plain PGD on the reconstruction loss") {
  Toy toy(6);
  AttackConfig none;
  none.iterations = 6;
  none.seed = 8;
  none.loss_variant = LossVariant::None;
  AttackConfig zero_grid = none;
  zero_grid.loss_variant = LossVariant::Style;
  zero_grid.ratio_grid = {0.0};
  const ProtectResult a = protect(toy.images, none, toy.model, toy.token, toy.extractor, toy.schedule);
  const ProtectResult b = protect(toy.images, zero_grid, toy.model, toy.token, toy.extractor, toy.schedule);
  CHECK(same_images(a.images.perturbed, b.images.perturbed));

  ImageList x = toy.images.clean;
  for (int k = 1; k <= none.iterations; ++k) {
    const Replay replay = make_replay(none.seed, k, x.size(), {3, 8, 8}, toy.schedule);
    std::vector<Var> leaves;
    for (const auto& im : x) leaves.emplace_back(im, true);
    const Var loss = reconstruction_loss(toy.model, leaves, Var::constant(toy.token.embedding), toy.schedule, replay);
    x = sign_step(x, gradients(loss, leaves), none.alpha, toy.images.clean, none.eta);
  }
  CHECK(same_images(a.images.perturbed, x));
}

TEST_CASE("both consistency signs run and pull the consistency loss in opposite directions") {
  Toy toy(7);
  AttackConfig c;
  c.iterations = 6;
  c.start_step = 1;
  c.ratio_mode = RatioMode::Static;
  c.static_ratio = 1e6;
  c.consistency_sign = -1;
  const ProtectResult down = protect(toy.images, c, toy.model, toy.token, toy.extractor, toy.schedule);
  c.consistency_sign = 1;
  const ProtectResult up = protect(toy.images, c, toy.model, toy.token, toy.extractor, toy.schedule);
  const auto value = [&](const ImageList& xs) {
    NoGradGuard ng;
    std::vector<Var> v;
    for (const auto& im : xs) v.push_back(Var::constant(im));
    return consistency_loss(v, toy.extractor).value().item();
  };
  const double start = value(toy.images.clean);
  CHECK(value(down.images.perturbed) < start);
  CHECK(value(up.images.perturbed) > start);
  for (const auto& rec : down.trace.records) CHECK(rec.lambda == 1e6);
}

TEST_CASE("content variant and alternating surrogate run within budget") {
  Toy toy(8);
  AttackConfig c;
  c.iterations = 4;
  c.loss_variant = LossVariant::Content;
  c.surrogate_mode = SurrogateMode::Alternating;
  c.surrogate_steps = 1;
  const ProtectResult r = protect(toy.images, c, toy.model, toy.token, toy.extractor, toy.schedule);
  CHECK_NOTHROW(r.images.check_invariants());
  CHECK(r.trace.records.back().consistency_active);
}

TEST_CASE("alternating surrogate update") {
  Toy toy(9);
  const Denoiser same = alternating_surrogate_update(toy.model, toy.images.clean, toy.token, toy.schedule, 0, 1e-3, 1);
  for (std::size_t i = 0; i < same.parameters().size(); ++i) {
    const auto& a = same.parameters()[i].value();
    const auto& b = toy.model.parameters()[i].value();
    CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  }
  const Denoiser u1 = alternating_surrogate_update(toy.model, toy.images.clean, toy.token, toy.schedule, 30, 1e-3, 2);
  const Denoiser u2 = alternating_surrogate_update(toy.model, toy.images.clean, toy.token, toy.schedule, 30, 1e-3, 2);
  bool identical = true;
  for (std::size_t i = 0; i < u1.parameters().size(); ++i) {
    const auto& a = u1.parameters()[i].value();
    const auto& b = u2.parameters()[i].value();
    identical = identical && std::equal(a.values().begin(), a.values().end(), b.values().begin());
  }
  CHECK(identical);

  double before = 0.0, after = 0.0;
  for (int d = 0; d < 8; ++d) {
    const Replay r = make_replay(77, d, toy.images.size(), {3, 8, 8}, toy.schedule);
    before += reconstruction_loss_value(toy.model, toy.images.clean, toy.token.embedding, toy.schedule, r);
    after += reconstruction_loss_value(u1, toy.images.clean, toy.token.embedding, toy.schedule, r);
  }
  CHECK(after < before);
}

TEST_CASE("image sets enforce their invariants") {
  CHECK_THROWS(ImageSet::from_clean({}, 0.05));
  CHECK_THROWS(ImageSet::from_clean({Tensor({1, 1, 1}, 1.5)}, 0.05));
  ImageSet s = ImageSet::from_clean({Tensor({1, 1, 2}, 0.5)}, 0.05);
  s.perturbed[0][0] = 0.56;
  CHECK_THROWS_AS(s.check_invariants(), std::logic_error);
  s.perturbed[0][0] = 0.55;
  CHECK_NOTHROW(s.check_invariants());
}
