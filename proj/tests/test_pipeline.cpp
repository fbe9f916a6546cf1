#include <doctest.h>

#include <cmath>

#include "rsddpm/pipeline.hpp"
#include "rsddpm/verify.hpp"

using namespace rsddpm;

namespace {

DenoiserConfig tiny_denoiser(int T) {
  DenoiserConfig c;
  c.base_channels = 8;
  c.groups = 2;
  c.time_embed_dim = 16;
  c.T = T;
  return c;
}

ShapeSceneSpec spec_with_seed(std::uint64_t seed) {
  ShapeSceneSpec s;
  s.seed = seed;
  return s;
}

}  // namespace

TEST_CASE("residual arithmetic") {
  const Tensor<float> x0({1, 2, 2}, 0.5f), x_hat({1, 2, 2}, 0.7f);
  const auto r = residual(x_hat, x0);
  const auto x_bar = residual_target(x0, r);
  for (auto v : r.data()) CHECK(v == doctest::Approx(0.2f));
  for (auto v : x_bar.data()) CHECK(v == doctest::Approx(0.3f));
  CHECK(residual(x0, x0) == Tensor<float>({1, 2, 2}, 0.0f));
  CHECK(residual_target(x0, Tensor<float>({1, 2, 2}, 0.0f)) == x0);
  CHECK(residual(x_hat, x0) == -1.0f * residual(x0, x_hat));
  CHECK_THROWS_AS(residual(x0, Tensor<float>({1, 2, 3}, 0.0f)), ShapeError);
  CHECK_THROWS_AS(combine(x0, Tensor<float>({2, 2}, 0.0f)), ShapeError);
}

TEST_CASE("combine") {
  Rng rng(1);
  const auto a = gaussian<double>(rng, {1, 4, 4}), b = gaussian<double>(rng, {1, 4, 4});
  CHECK(combine(a, a) == a);
  CHECK(combine(a, b) == combine(b, a));
  const auto r = gaussian<double>(rng, {1, 4, 4});
  CHECK(max_abs_diff(combine(a - r, a + r), a) < 1e-15);
}

TEST_CASE("residual sample invariants") {
  Rng rng(2);
  for (int k = 0; k < 50; ++k) {
    Tensor<double> x0({1, 4, 4}), x_hat({1, 4, 4});
    for (auto& v : x0.data()) v = rng.uniform() < 0.5 ? -1.0 : 1.0;
    for (auto& v : x_hat.data()) v = 2 * rng.uniform() - 1;
    const auto s = make_residual_sample(x0, x0, x_hat);
    CHECK(s.r == x_hat - x0);
    CHECK(s.x_bar == x0 - s.r);
    CHECK(max_abs_diff(s.x_bar, 2.0 * x0 - x_hat) < 1e-15);
    CHECK(max_abs_diff(x_hat - x0, x0 - s.x_bar) < 1e-15);
    CHECK(max_abs(s.x_bar) <= 3.0);
  }
  const auto r = check_residual_identity(1000, 3);
  CHECK_MESSAGE(r.passed, format_check(r));
}

TEST_CASE("ensemble error is half the error in residual-target space") {
  Rng rng(4);
  for (int k = 0; k < 20; ++k) {
    const auto x0 = gaussian<double>(rng, {1, 4, 4}), x_hat = gaussian<double>(rng, {1, 4, 4});
    const auto target = residual_target(x0, residual(x_hat, x0));
    const auto estimate = target + 0.3 * gaussian<double>(rng, {1, 4, 4});
    const auto err = combine(estimate, x_hat) - x0;
    const auto half = 0.5 * (estimate - target);
    CHECK(max_abs_diff(err, half) < 1e-14);
  }
}

TEST_CASE("restoration residual is the stored corruption") {
  auto spec = spec_with_seed(9);
  const auto data = gen_restoration<float>(spec, 20);
  for (const auto& it : data.items) {
    CHECK(direct_residual(it.image, it.target) == *it.corruption);
    const auto x_bar = residual_target(it.target, direct_residual(it.image, it.target));
    CHECK(max_abs_diff(x_bar, 2.0f * it.target - it.image) < 1e-6f);
  }
}

TEST_CASE("diffusion training contracts") {
  const auto data = make_benchmark<float>(spec_with_seed(11), Mode::segmentation, 8, 4, 4);
  const Schedule schedule(10);
  DiffusionTrainConfig cfg;
  cfg.train.steps = 6;
  cfg.train.batch = 4;
  cfg.train.eval_every = 3;

  SUBCASE("an unfrozen end-to-end model is rejected") {
    E2EModel<float> e2e(E2EConfig{}, 1);
    Denoiser<float> d(tiny_denoiser(10), 1);
    Rng rng(1);
    CHECK_THROWS_AS(train_diffusion(d, &e2e, data, schedule, cfg, rng), std::logic_error);
  }
  SUBCASE("segmentation without an end-to-end model is rejected") {
    Denoiser<float> d(tiny_denoiser(10), 1);
    Rng rng(1);
    CHECK_THROWS_AS(train_diffusion<float>(d, nullptr, data, schedule, cfg, rng), std::invalid_argument);
  }
  SUBCASE("empty training split is rejected") {
    Dataset<float> empty;
    const auto e2e = freeze(E2EModel<float>(E2EConfig{}, 1));
    Denoiser<float> d(tiny_denoiser(10), 1);
    Rng rng(1);
    CHECK_THROWS_AS(train_diffusion(d, &e2e, empty, schedule, cfg, rng), std::invalid_argument);
  }
  SUBCASE("schedule and denoiser must agree on T") {
    const auto e2e = freeze(E2EModel<float>(E2EConfig{}, 1));
    Denoiser<float> d(tiny_denoiser(20), 1);
    Rng rng(1);
    CHECK_THROWS_AS(train_diffusion(d, &e2e, data, schedule, cfg, rng), std::invalid_argument);
  }
  SUBCASE("frozen model untouched, full cache hits after the first epoch, finite monotone log") {
    const auto e2e = freeze(E2EModel<float>(E2EConfig{}, 1));
    const auto before = e2e.parameters().digest();
    Denoiser<float> d(tiny_denoiser(10), 1);
    Rng rng(1);
    std::vector<TrainRecord> log;
    const auto res = train_diffusion(d, &e2e, data, schedule, cfg, rng, [&](const TrainRecord& r) { log.push_back(r); });
    CHECK(e2e.parameters().digest() == before);
    CHECK(res.cache_misses == 8);
    CHECK(res.later_epoch_lookups > 0);
    CHECK(res.later_epoch_hits == res.later_epoch_lookups);
    REQUIRE(log.size() == 6);
    for (std::size_t i = 0; i < log.size(); ++i) {
      CHECK(log[i].step == static_cast<int>(i + 1));
      CHECK(std::isfinite(log[i].loss));
    }
    CHECK(res.val_losses.size() == 2);
  }
  SUBCASE("same seed gives the same parameters for any thread count") {
    const auto e2e = freeze(E2EModel<float>(E2EConfig{}, 1));
    auto run = [&](std::size_t threads) {
      Denoiser<float> d(tiny_denoiser(10), 3);
      Rng rng(3);
      auto c = cfg;
      c.train.threads = threads;
      train_diffusion(d, &e2e, data, schedule, c, rng);
      return d.parameters().digest();
    };
    const auto a = run(1);
    CHECK(a == run(1));
    CHECK(a == run(4));
  }
}

TEST_CASE("restoration training needs no end-to-end model") {
  const auto data = make_benchmark<float>(spec_with_seed(12), Mode::restoration, 8, 2, 2);
  const Schedule schedule(10);
  DiffusionTrainConfig cfg;
  cfg.train.steps = 2;
  cfg.train.batch = 2;
  Denoiser<float> d(tiny_denoiser(10), 1);
  Rng rng(1);
  const auto res = train_diffusion<float>(d, nullptr, data, schedule, cfg, rng);
  CHECK(res.steps_run == 2);
}

TEST_CASE("weight averaging follows the exponential recurrence") {
  const auto data = make_benchmark<float>(spec_with_seed(14), Mode::restoration, 8, 0, 0);
  const Schedule schedule(10);
  auto trained = [&](int steps, double decay) {
    DiffusionTrainConfig cfg;
    cfg.train.steps = steps;
    cfg.train.batch = 4;
    cfg.train.eval_every = 0;
    cfg.ema_decay = decay;
    Denoiser<float> d(tiny_denoiser(10), 6);
    Rng rng(7);
    if (steps) train_diffusion<float>(d, nullptr, data, schedule, cfg, rng);
    return d.parameters().flatten();
  };
  // Plain runs of 1..3 steps share one trajectory; average them by hand.
  const auto initial = trained(0, 0);
  std::vector<double> expected(initial.begin(), initial.end());
  for (int k = 1; k <= 3; ++k) {
    const auto p = trained(k, 0);
    for (std::size_t i = 0; i < p.size(); ++i) expected[i] = 0.75 * expected[i] + 0.25 * p[i];
  }
  const auto averaged = trained(3, 0.75);
  double worst = 0;
  for (std::size_t i = 0; i < averaged.size(); ++i) worst = std::max(worst, std::abs(averaged[i] - expected[i]));
  CHECK(worst < 1e-6);
  CHECK(averaged != trained(3, 0));
}

TEST_CASE("diffusion training reduces the loss on a small set") {
  const auto data = make_benchmark<float>(spec_with_seed(13), Mode::segmentation, 16, 0, 1);
  auto e2e = E2EModel<float>(E2EConfig{}, 2);
  e2e.freeze();
  const Schedule schedule(20);
  DiffusionTrainConfig cfg;
  cfg.train.steps = 300;
  cfg.train.batch = 16;
  cfg.train.adam.lr = 2e-3;
  cfg.train.eval_every = 0;
  Denoiser<float> d(tiny_denoiser(20), 4);
  const auto items = data.split(Split::train);
  const double initial = diffusion_eval_loss(d, &e2e, items, data.mode, schedule, 1);
  Rng rng(4);
  const auto res = train_diffusion(d, &e2e, data, schedule, cfg, rng);
  const double final_loss = diffusion_eval_loss(d, &e2e, items, data.mode, schedule, 1);
  MESSAGE("fixed-draw loss " << initial << " -> " << final_loss);
  CHECK(final_loss < 0.5 * initial);
  CHECK(res.epoch_losses.back() < res.epoch_losses.front());
}

TEST_CASE("inference") {
  const Schedule schedule(8);
  const Denoiser<float> d(tiny_denoiser(8), 5);
  const auto e2e = freeze(E2EModel<float>(E2EConfig{}, 5));
  Rng img_rng(6);
  const auto image = gaussian<float>(img_rng, {1, 16, 16});

  Rng a(7), b(7);
  const auto out = infer(d, &e2e, image, schedule, a);
  CHECK(out.combined == combine(out.x_bar, out.x_hat));
  CHECK(out.x_hat == e2e.predict(image));
  const auto again = infer(d, &e2e, image, schedule, b);
  CHECK(again.combined == out.combined);
  CHECK(again.x_bar == out.x_bar);

  Rng c(7);
  const auto rest = infer<float>(d, nullptr, image, schedule, c);
  CHECK(rest.x_hat == image);
  CHECK(rest.x_bar == out.x_bar);  // same seed, same chain; only x_hat differs
}

TEST_CASE("split evaluation") {
  const auto data = make_benchmark<float>(spec_with_seed(14), Mode::segmentation, 2, 2, 3);
  const Schedule schedule(4);
  const Denoiser<float> d(tiny_denoiser(4), 1);
  const auto e2e = freeze(E2EModel<float>(E2EConfig{}, 1));
  std::vector<EnsembleOutput<float>> outs;
  const auto ev = evaluate_split(d, &e2e, data, Split::test, schedule, 99, 2, &outs);
  CHECK(ev.baseline.method == "e2e");
  CHECK(ev.diffusion.method == "diffusion");
  CHECK(ev.ensemble.method == "ensemble");
  CHECK(ev.ensemble.size() == 3);
  CHECK(outs.size() == 3);
  CHECK(std::isfinite(ev.ensemble.aggregate().iou));
  const auto again = evaluate_split(d, &e2e, data, Split::test, schedule, 99, 1);
  CHECK(again.ensemble.aggregate().mse == ev.ensemble.aggregate().mse);
  CHECK_THROWS_AS(evaluate_split<float>(d, nullptr, data, Split::test, schedule, 99, 1), std::invalid_argument);
}
