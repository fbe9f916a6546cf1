#include <doctest.h>

#include <cmath>

#include "rsddpm/diffusion.hpp"
#include "rsddpm/verify.hpp"

using namespace rsddpm;

namespace {

// Long-double reference values computed straight from the affine formula.
long double ref_beta(int T, int t) { return (1e-4L * (T - t) + 2e-2L * (t - 1)) / (T - 1); }

long double ref_alpha_bar(int T, int t) {
  long double p = 1;
  for (int s = 1; s <= t; ++s) p *= 1 - ref_beta(T, s);
  return p;
}

}  // namespace

TEST_CASE("schedule rejects T below two with a message about T - 1") {
  for (int T : {-1, 0, 1}) {
    try {
      Schedule s(T);
      FAIL("expected an exception");
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find("T-1") != std::string::npos);
    }
  }
}

TEST_CASE("schedule endpoints") {
  const Schedule s(1000);
  CHECK(std::abs(s.beta(1) - 1e-4) < 1e-15);
  CHECK(std::abs(s.beta(1000) - 0.02) < 1e-15);
  CHECK(s.lookup(1000).beta == doctest::Approx(0.02).epsilon(1e-14));
  CHECK(s.beta_tilde(1) == 0.0);
  CHECK(s.lookup(1).beta_tilde == 0.0);
  const Schedule two(2);
  CHECK(std::abs(two.beta(1) - 1e-4) < 1e-15);
  CHECK(std::abs(two.beta(2) - 0.02) < 1e-15);
}

TEST_CASE("schedule at T = 3 against hand values") {
  const Schedule s(3);
  CHECK(std::abs(s.beta(2) - 0.01005) < 1e-15);
  CHECK(std::abs(s.lookup(2).beta - 0.01005) < 1e-15);
  const double ab3 = 0.9999 * 0.98995 * 0.98;
  CHECK(std::abs(s.alpha_bar(3) - ab3) < 1e-15);
  CHECK(s.alpha_bar(3) == doctest::Approx(0.970054).epsilon(1e-6));
}

TEST_CASE("schedule matches an extended-precision table") {
  for (int T : {2, 3, 10, 100, 1000}) {
    const Schedule s(T);
    for (int t = 1; t <= T; ++t) {
      CHECK(std::abs(s.beta(t) - static_cast<double>(ref_beta(T, t))) < 1e-15);
      const double ab = static_cast<double>(ref_alpha_bar(T, t));
      // Rounding accumulates over the product: at most a few ulps per factor.
      CHECK(std::abs(s.alpha_bar(t) - ab) / ab < 4e-16 * t);
    }
  }
}

TEST_CASE("schedule monotonicity and posterior variance bounds") {
  const Schedule s(100);
  for (int t = 1; t < 100; ++t) {
    CHECK(s.beta(t + 1) > s.beta(t));
    CHECK(s.alpha_bar(t + 1) < s.alpha_bar(t));
  }
  CHECK(s.alpha_bar(100) > 0);
  CHECK(s.alpha_bar(1) < 1);
  for (int t = 1; t <= 100; ++t) {
    CHECK(s.beta_tilde(t) <= s.beta(t));
    CHECK(s.sigma_sq(t) == s.beta_tilde(t));
    CHECK(s.alpha(t) == 1.0 - s.beta(t));
  }
}

TEST_CASE("lookup rejects timesteps outside 1..T") {
  const Schedule s(10);
  CHECK_THROWS_AS(s.lookup(0), std::out_of_range);
  CHECK_THROWS_AS(s.lookup(11), std::out_of_range);
  CHECK(s.alpha_bar(0) == 1.0);
}

TEST_CASE("closed-form noising") {
  const Schedule s(3);
  const Tensor<double> ones({1, 2, 2}, 1.0), zeros({1, 2, 2}, 0.0);
  SUBCASE("zero noise scales by sqrt(alpha_bar)") {
    const auto x = q_sample_closed(ones, 2, zeros, s);
    for (auto v : x.data()) CHECK(v == std::sqrt(s.alpha_bar(2)));
  }
  SUBCASE("ones and ones at t = 3") {
    const double ab = 0.9999 * 0.98995 * 0.98;
    const double expect = std::sqrt(ab) + std::sqrt(1 - ab);  // 1.157962...
    const auto x = q_sample_closed(ones, 3, ones, s);
    for (auto v : x.data()) CHECK(std::abs(v - expect) < 1e-14);
    CHECK(expect == doctest::Approx(1.157962).epsilon(1e-6));
  }
  CHECK_THROWS_AS(q_sample_closed(ones, 1, Tensor<double>({2, 2}, 0.0), s), ShapeError);
}

TEST_CASE("one-step noising") {
  const Schedule s(1000);
  const Tensor<double> ones({3}, 1.0), zeros({3}, 0.0);
  const auto c = q_sample_step(ones, 500, zeros, s);
  for (auto v : c.data()) CHECK(v == std::sqrt(1 - s.beta(500)));
  const auto x1 = q_sample_step(zeros, 1, ones, s);
  for (auto v : x1.data()) CHECK(std::abs(v - 0.01) < 1e-15);
}

TEST_CASE("iterated and closed-form noising agree in distribution") {
  const auto r = check_forward_consistency(10, 100000, 17);
  CHECK_MESSAGE(r.passed, format_check(r));
}

TEST_CASE("posterior mean") {
  const Schedule s(50);
  SUBCASE("oracle identity with the true noise") {
    const auto r = check_posterior_mean(s, 100, 5);
    CHECK_MESSAGE(r.passed, format_check(r));
  }
  SUBCASE("zero prediction reduces to x_t / sqrt(alpha_t)") {
    Rng rng(1);
    const auto x = gaussian<double>(rng, {1, 3, 3});
    const auto p = posterior_mean(x, Tensor<double>(x.shape()), 20, s);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(p.mean[i] == doctest::Approx(x[i] / std::sqrt(s.alpha(20))));
  }
  SUBCASE("t = 1 has zero variance") {
    const Tensor<double> x({2}, 0.3);
    CHECK(posterior_mean(x, x, 1, s).variance_scalar == 0.0);
  }
  SUBCASE("swapping alpha_bar for alpha is caught") {
    const auto r = check_posterior_mean(mutated_schedule(50), 100, 5);
    CHECK_FALSE(r.passed);
  }
  CHECK_THROWS_AS(posterior_mean(Tensor<double>({2}), Tensor<double>({3}), 2, s), ShapeError);
  CHECK_THROWS_AS(posterior_mean(Tensor<double>({2}), Tensor<double>({2}), 51, s), std::out_of_range);
}

TEST_CASE("reverse step") {
  const Schedule s(100);
  Rng rng(2);
  const auto x = gaussian<double>(rng, {1, 4, 4}), e = gaussian<double>(rng, {1, 4, 4});
  for (int t = 2; t <= 100; ++t) {
    CHECK(reverse_step(x, e, t, Tensor<double>(x.shape()), s) == posterior_mean(x, e, t, s).mean);
    CHECK(s.beta(t) / std::sqrt(1 - s.alpha_bar(t)) == (1 - s.alpha(t)) / std::sqrt(1 - s.alpha_bar(t)));
  }
  const auto z = gaussian<double>(rng, x.shape());
  const auto noisy = reverse_step(x, e, 30, z, s);
  const auto mean = posterior_mean(x, e, 30, s).mean;
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(noisy[i] == doctest::Approx(mean[i] + std::sqrt(s.beta_tilde(30)) * z[i]).epsilon(1e-14));
  }
  CHECK_THROWS_AS(reverse_step(x, e, 1, z, s), std::invalid_argument);
}

TEST_CASE("oracle reverse pass at T = 5 stays bounded") {
  const Schedule s(5);
  Rng rng(4);
  const auto x0 = gaussian<double>(rng, {1, 4, 4});
  const auto eps = gaussian<double>(rng, x0.shape());
  // Noise a single chain, then undo it with the exact eps for each x_t.
  auto x = q_sample_closed(x0, 5, eps, s);
  for (int t = 5; t >= 2; --t) {
    Tensor<double> e(x.shape());
    for (std::size_t i = 0; i < e.size(); ++i) {
      e[i] = (x[i] - std::sqrt(s.alpha_bar(t)) * x0[i]) / std::sqrt(1 - s.alpha_bar(t));
    }
    x = reverse_step(x, e, t, Tensor<double>(x.shape()), s);
    CHECK(x.all_finite());
    CHECK(max_abs(x) <= max_abs(x0) + 5.0);
  }
  Tensor<double> e1(x.shape());
  for (std::size_t i = 0; i < e1.size(); ++i) e1[i] = (x[i] - std::sqrt(s.alpha_bar(1)) * x0[i]) / std::sqrt(1 - s.alpha_bar(1));
  const auto out = final_step(x, e1, s);
  CHECK(out.all_finite());
  CHECK(max_abs_diff(out, x0) < 1e-6);
}

TEST_CASE("final step") {
  const Schedule s(1000);
  Rng rng(5);
  const auto x0 = gaussian<double>(rng, {1, 4, 4}), eps = gaussian<double>(rng, {1, 4, 4});
  const auto x1 = q_sample_closed(x0, 1, eps, s);
  CHECK(max_abs_diff(final_step(x1, eps, s), x0) < 1e-6);
  const auto plain = final_step(x1, Tensor<double>(x1.shape()), s);
  for (std::size_t i = 0; i < x1.size(); ++i) CHECK(plain[i] == doctest::Approx(x1[i] / std::sqrt(s.alpha(1))));
  CHECK(1 / std::sqrt(s.alpha(1)) == doctest::Approx(1.00005).epsilon(1e-6));
}

TEST_CASE("training loss is a mean") {
  const Tensor<double> e({2, 3}, 0.0), ones({2, 3}, 1.0);
  CHECK(training_loss(e, ones) == 1.0);
  CHECK(training_loss(ones, ones) == 0.0);
  const auto r = check_training_loss(8);
  CHECK_MESSAGE(r.passed, format_check(r));
  CHECK_THROWS_AS(training_loss(e, Tensor<double>({3, 2}, 0.0)), ShapeError);
}

TEST_CASE("sampler") {
  const Schedule s(5);
  SUBCASE("zero predictor follows the variance recursion") {
    const auto r = check_sampler_variance(5, 10000, 6);
    CHECK_MESSAGE(r.passed, format_check(r));
  }
  SUBCASE("oracle predictor with z = 0 recovers x0") {
    const auto r = check_oracle_denoiser(5, 6);
    CHECK_MESSAGE(r.passed, format_check(r));
  }
  SUBCASE("fixed seed gives bit-identical output of the state shape") {
    EpsilonPredictor<float> f = [](const Tensor<float>& x, const Tensor<float>& c, int t) {
      Tensor<float> out(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = 0.1f * x[i] + 0.05f * c[i] + 0.01f * float(t);
      return out;
    };
    Rng a(3), b(3);
    const Tensor<float> cond({1, 4, 4}, 0.5f);
    const auto xa = sample(f, cond, {1, 4, 4}, s, a);
    const auto xb = sample(f, cond, {1, 4, 4}, s, b);
    CHECK(xa == xb);
    CHECK(xa.shape() == Shape{1, 4, 4});
  }
}
