#include <doctest.h>

#include <cmath>
#include <set>

#include "rsddpm/data.hpp"
#include "rsddpm/metrics.hpp"
#include "rsddpm/pipeline.hpp"
#include "rsddpm/verify.hpp"

using namespace rsddpm;

namespace {

Tensor<double> mask_from(std::initializer_list<double> v, std::size_t h, std::size_t w) {
  return Tensor<double>({1, h, w}, std::vector<double>(v));
}

}  // namespace

TEST_CASE("segmentation generator is a pure function of scene parameters and index") {
  ShapeSceneSpec spec;
  spec.seed = 3;
  const auto a = gen_segmentation<float>(spec, 12);
  const auto b = gen_segmentation<float>(spec, 12);
  REQUIRE(a.items.size() == 12);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(a.items[i].image == b.items[i].image);
    CHECK(a.items[i].target == b.items[i].target);
  }
  const auto single = gen_segmentation<float>(spec, 1, 7);
  CHECK(single.items[0].image == a.items[7].image);
  CHECK(single.items[0].index == 7);
  spec.seed = 4;
  CHECK_FALSE(gen_segmentation<float>(spec, 1).items[0].image == a.items[0].image);
}

TEST_CASE("masks are binary with bounded foreground fraction") {
  ShapeSceneSpec spec;
  spec.seed = 5;
  const auto d = gen_segmentation<double>(spec, 200);
  for (const auto& it : d.items) {
    double fg = 0;
    for (auto v : it.target.data()) {
      CHECK((v == 0.0 || v == 1.0));
      fg += v;
    }
    fg /= static_cast<double>(it.target.size());
    CHECK(fg >= spec.min_fg_fraction);
    CHECK(fg <= spec.max_fg_fraction);
    CHECK(it.image.shape() == Shape{1, 16, 16});
    CHECK(it.image.all_finite());
    const auto enc = encode_mask(it.target);
    for (auto v : enc.data()) CHECK((v == -1.0 || v == 1.0));
  }
}

TEST_CASE("generator rejects bad requests") {
  ShapeSceneSpec spec;
  CHECK_THROWS_AS(gen_segmentation<float>(spec, 0), std::invalid_argument);
  spec.height = spec.width = 4;
  CHECK_THROWS_AS(gen_segmentation<float>(spec, 1), std::invalid_argument);
  CHECK_THROWS_AS(gen_restoration<float>(spec, 1), std::invalid_argument);
}

TEST_CASE("restoration corruption") {
  ShapeSceneSpec spec;
  spec.seed = 6;
  spec.corruption = 0.2;
  const auto d = gen_restoration<double>(spec, 256);
  double energy = 0;
  std::size_t n = 0;
  for (const auto& it : d.items) {
    REQUIRE(it.corruption);
    CHECK(direct_residual(it.image, it.target) == *it.corruption);
    for (auto v : it.corruption->data()) {
      energy += v * v;
      ++n;
    }
  }
  const double rms = std::sqrt(energy / static_cast<double>(n));
  CHECK(std::abs(rms - 0.2) / 0.2 < 0.05);

  spec.corruption = 0;
  for (const auto& it : gen_restoration<double>(spec, 10).items) CHECK(it.image == it.target);
}

TEST_CASE("benchmark splits are disjoint") {
  ShapeSceneSpec spec;
  const auto d = make_benchmark<float>(spec, Mode::segmentation, 20, 5, 7);
  CHECK(d.split(Split::train).size() == 20);
  CHECK(d.split(Split::val).size() == 5);
  CHECK(d.split(Split::test).size() == 7);
  std::set<std::uint64_t> seen;
  for (const auto& it : d.items) CHECK(seen.insert(it.index).second);
}

TEST_CASE("iou and dice examples") {
  const auto full = Tensor<double>({1, 4, 4}, 1.0);
  CHECK(iou(full, full) == 1.0);
  CHECK(dice(full, full) == 1.0);

  const auto left = mask_from({1, -1, 1, -1}, 2, 2), right = mask_from({-1, 1, -1, 1}, 2, 2);
  CHECK(iou(left, right) == 0.0);
  CHECK(dice(left, right) == 0.0);

  Tensor<double> upper({1, 4, 4}, -1.0);
  for (std::size_t i = 0; i < 8; ++i) upper[i] = 1.0;
  CHECK(iou(upper, full) == 0.5);
  CHECK(dice(upper, full) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));

  const auto empty = Tensor<double>({1, 4, 4}, -1.0);
  CHECK(iou(empty, empty) == 1.0);
  CHECK(dice(empty, empty) == 1.0);
  CHECK(iou(Tensor<double>({1, 4, 4}, 0.0), empty) == 1.0);  // 0 is background

  CHECK_THROWS_AS(iou(full, Tensor<double>({1, 2, 8}, 1.0)), ShapeError);
}

TEST_CASE("dice and iou identity on random masks") {
  const auto r = check_metric_identities(7);
  CHECK_MESSAGE(r.passed, format_check(r));
  Rng rng(8);
  for (int k = 0; k < 100; ++k) {
    Tensor<double> a({1, 5, 5}), b({1, 5, 5});
    for (auto& v : a.data()) v = rng.uniform() - 0.5;
    for (auto& v : b.data()) v = rng.uniform() - 0.5;
    CHECK(dice(a, b) >= iou(a, b));
  }
}

TEST_CASE("mse and psnr") {
  const Tensor<double> a({4}, std::vector<double>{0, 0, 0, 0}), b({4}, std::vector<double>{1, -1, 1, -1});
  CHECK(mse(a, b) == 1.0);
  CHECK(psnr(a, b) == doctest::Approx(10 * std::log10(4.0)));
  CHECK(std::isinf(psnr(a, a)));
  MetricReport r;
  r.add(score(a, a));
  r.add(score(a, b));
  const auto m = r.aggregate();
  CHECK(m.mse == 0.5);
  CHECK(m.psnr == doctest::Approx(10 * std::log10(4.0)));
  MetricReport only_inf;
  only_inf.add(score(a, a));
  CHECK(std::isinf(only_inf.aggregate().psnr));
}
