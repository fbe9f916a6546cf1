#include <doctest.h>

#include <cmath>

#include "rsddpm/data.hpp"
#include "rsddpm/metrics.hpp"
#include "rsddpm/models.hpp"
#include "rsddpm/optimizer.hpp"
#include "rsddpm/verify.hpp"

using namespace rsddpm;

namespace {

DenoiserConfig small_denoiser() {
  DenoiserConfig c;
  c.base_channels = 8;
  c.groups = 2;
  c.time_embed_dim = 16;
  c.T = 20;
  return c;
}

std::vector<SupervisedPair<float>> pairs(const Dataset<float>& d) {
  std::vector<SupervisedPair<float>> out;
  for (const auto& it : d.items) out.push_back({it.image, encoded_target(it, d.mode)});
  return out;
}

}  // namespace

TEST_CASE("timestep embedding layout") {
  const auto e = timestep_embedding<double>(5, 4);
  REQUIRE(e.shape() == Shape{4});
  CHECK(e[0] == doctest::Approx(std::sin(5.0)));
  CHECK(e[1] == doctest::Approx(std::sin(5.0 * 0.01)));
  CHECK(e[2] == doctest::Approx(std::cos(5.0)));
  CHECK(e[3] == doctest::Approx(std::cos(5.0 * 0.01)));
}

TEST_CASE("denoiser contracts") {
  const Denoiser<double> d(DenoiserConfig{}, 1);
  CHECK(d.parameters().numel() <= 1000000);
  Rng rng(2);
  const auto x = gaussian<double>(rng, {1, 16, 16});
  const auto cond = gaussian<double>(rng, {1, 16, 16});

  SUBCASE("output shape equals the state shape") { CHECK(d.predict(x, cond, 7).shape() == x.shape()); }
  SUBCASE("finite for inputs up to magnitude 10") {
    CHECK(d.predict(Tensor<double>({1, 16, 16}, 10.0), Tensor<double>({1, 16, 16}, -10.0), 100).all_finite());
    CHECK(d.predict(10.0 * clamp(x, -1.0, 1.0), cond, 1).all_finite());
  }
  SUBCASE("time embedding is live") { CHECK(max_abs_diff(d.predict(x, cond, 1), d.predict(x, cond, 100)) > 0); }
  SUBCASE("conditioning is live") {
    Tensor<double> permuted(cond.shape());
    for (std::size_t i = 0; i < cond.size(); ++i) permuted[i] = cond[cond.size() - 1 - i];
    CHECK(max_abs_diff(d.predict(x, cond, 10), d.predict(x, permuted, 10)) > 0);
  }
  SUBCASE("deterministic forward") { CHECK(d.predict(x, cond, 3) == d.predict(x, cond, 3)); }
  SUBCASE("invalid inputs") {
    CHECK_THROWS(d.predict(x, cond, 0));
    CHECK_THROWS(d.predict(x, cond, 101));
    CHECK_THROWS(d.predict(x, gaussian<double>(rng, {1, 8, 8}), 3));
    CHECK_THROWS(d.predict(gaussian<double>(rng, {1, 10, 10}), gaussian<double>(rng, {1, 10, 10}), 3));
  }
}

TEST_CASE("denoiser gradient matches central differences") {
  const auto r = check_denoiser_gradient(small_denoiser(), 20, 1e-4, 3);
  CHECK_MESSAGE(r.passed, format_check(r));
}

TEST_CASE("same seed gives the same initial parameters") {
  CHECK(Denoiser<float>(small_denoiser(), 5).parameters() == Denoiser<float>(small_denoiser(), 5).parameters());
  CHECK_FALSE(Denoiser<float>(small_denoiser(), 5).parameters() == Denoiser<float>(small_denoiser(), 6).parameters());
}

TEST_CASE("e2e output range, purity and freezing") {
  E2EModel<float> m(E2EConfig{}, 4);
  Rng rng(4);
  const auto img = gaussian<float>(rng, {1, 16, 16});
  const auto out = m.predict(img);
  CHECK(out.shape() == img.shape());
  for (auto v : out.data()) {
    CHECK(v >= -1.0f);
    CHECK(v <= 1.0f);
  }
  CHECK(m.predict(img) == out);

  const auto digest = m.parameters().digest();
  const auto frozen = freeze(m);
  CHECK(frozen.frozen());
  CHECK(frozen.predict(img) == out);

  auto copy = frozen;
  AdamState<float> st;
  Gradient<float> g;
  g.values.assign(copy.parameters().numel(), 1.0f);
  CHECK_THROWS_AS(adam_step(copy.parameters(), g, st, AdamConfig{}), std::logic_error);
  CHECK(copy.parameters().digest() == digest);

  Graph<float> graph;
  auto b = graph.bind(frozen.parameters());
  auto loss = graph.mean(graph.square(frozen.forward(graph, b, graph.constant(img))));
  graph.backward(loss);
  for (auto v : b.vars) CHECK(graph.grad(v) == nullptr);
}

TEST_CASE("e2e training") {
  ShapeSceneSpec spec;
  spec.seed = 77;

  SUBCASE("overfits a 32-sample set with a monotone evaluation curve") {
    const auto data = gen_segmentation<float>(spec, 32);
    E2EModel<float> m(E2EConfig{}, 1);
    TrainConfig tc;
    tc.steps = 400;
    tc.batch = 32;
    tc.adam.lr = 1e-2;
    tc.eval_every = 10;
    Rng rng(1);
    const auto res = train_e2e(m, pairs(data), {}, tc, rng);
    REQUIRE(res.eval_losses.size() >= 10);
    for (std::size_t i = 1; i < 10; ++i) CHECK(res.eval_losses[i] < res.eval_losses[i - 1]);
    CHECK(res.eval_losses.back() < 0.1 * res.eval_losses.front());
  }

  SUBCASE("memorizes a single sample") {
    const auto data = gen_segmentation<float>(spec, 1);
    E2EModel<float> m(E2EConfig{}, 2);
    TrainConfig tc;
    tc.steps = 200;
    tc.batch = 1;
    tc.adam.lr = 1e-2;
    tc.eval_every = 0;
    Rng rng(2);
    train_e2e(m, pairs(data), {}, tc, rng);
    const auto& it = data.items[0];
    CHECK(iou(m.predict(it.image), encoded_target(it, data.mode)) > 0.95);
  }

  SUBCASE("deterministic given the seed") {
    const auto data = gen_segmentation<float>(spec, 16);
    TrainConfig tc;
    tc.steps = 20;
    tc.batch = 4;
    tc.threads = 3;
    auto run = [&](std::size_t threads) {
      E2EModel<float> m(E2EConfig{}, 3);
      Rng rng(3);
      auto c = tc;
      c.threads = threads;
      train_e2e(m, pairs(data), {}, c, rng);
      return m.parameters().digest();
    };
    CHECK(run(1) == run(1));
    CHECK(run(1) == run(3));
  }

  SUBCASE("rejects empty data and frozen models") {
    E2EModel<float> m(E2EConfig{}, 1);
    Rng rng(1);
    CHECK_THROWS_AS(train_e2e(m, {}, {}, TrainConfig{}, rng), std::invalid_argument);
    auto f = freeze(m);
    CHECK_THROWS(train_e2e(f, pairs(gen_segmentation<float>(spec, 2)), {}, TrainConfig{}, rng));
  }
}

TEST_CASE("e2e generalizes beyond chance on held-out scenes") {
  ShapeSceneSpec spec;
  spec.seed = 5;
  const auto train = gen_segmentation<float>(spec, 256);
  const auto test = gen_segmentation<float>(spec, 64, 10000, Split::test);
  E2EModel<float> m(E2EConfig{}, 5);
  TrainConfig tc;
  tc.steps = 300;
  tc.batch = 16;
  tc.adam.lr = 1e-3;
  tc.eval_every = 0;
  Rng rng(5);
  train_e2e(m, pairs(train), {}, tc, rng);
  MetricReport r;
  for (const auto& it : test.items) r.add(score(m.predict(it.image), encoded_target(it, test.mode)));
  CHECK(r.aggregate().iou > 0.5);
}
