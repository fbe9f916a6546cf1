#include "rsddpm/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "rsddpm/checkpoint.hpp"
#include "rsddpm/diffusion.hpp"
#include "rsddpm/metrics.hpp"
#include "rsddpm/pipeline.hpp"

namespace rsddpm {

CheckResult make_result(std::string name, double error, double tolerance, std::string detail) {
  return {std::move(name), error, tolerance, error <= tolerance, std::move(detail)};
}

Schedule mutated_schedule(int T) {
  Schedule s(T);
  std::vector<double> wrong(static_cast<std::size_t>(T) + 1, 1.0);
  for (int t = 1; t <= T; ++t) wrong[static_cast<std::size_t>(t)] = s.alpha(t);
  s.overwrite_alpha_bar(wrong);
  return s;
}

namespace {

// Independent long-double table straight from the affine formula.
struct OracleTable {
  std::vector<long double> beta, alpha_bar;  // index t, alpha_bar[0] = 1
  explicit OracleTable(int T) : beta(T + 1, 0.0L), alpha_bar(T + 1, 1.0L) {
    for (int t = 1; t <= T; ++t) {
      beta[t] = (1e-4L * (T - t) + 2e-2L * (t - 1)) / (T - 1);
      alpha_bar[t] = alpha_bar[t - 1] * (1.0L - beta[t]);
    }
  }
};

std::string list(const std::vector<int>& Ts) {
  std::string s = "T in {";
  for (std::size_t i = 0; i < Ts.size(); ++i) s += (i ? "," : "") + std::to_string(Ts[i]);
  return s + "}";
}

Tensor<double> random_tensor(Rng& rng, const Shape& shape, double lo, double hi) {
  Tensor<double> t(shape);
  for (auto& v : t.data()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

struct Moments {
  double mean = 0, var = 0;
};

Moments moments(const Tensor<double>& x) {
  Moments m;
  for (auto v : x.data()) m.mean += v;
  m.mean /= static_cast<double>(x.size());
  for (auto v : x.data()) m.var += (v - m.mean) * (v - m.mean);
  m.var /= static_cast<double>(x.size() - 1);
  return m;
}

// z-scores of sample moments against a N(mean, var) reference.
double moment_z(const Moments& m, double mean, double var, std::size_t n) {
  const double se_mean = std::sqrt(var / static_cast<double>(n));
  const double se_var = var * std::sqrt(2.0 / static_cast<double>(n - 1));
  return std::max(std::abs(m.mean - mean) / se_mean, std::abs(m.var - var) / se_var);
}

}  // namespace

CheckResult check_schedule_endpoints(const std::vector<int>& Ts, double tol) {
  double err = 0;
  for (int T : Ts) {
    const Schedule s(T);
    err = std::max({err, std::abs(s.beta(1) - 1e-4), std::abs(s.beta(T) - 2e-2)});
  }
  return make_result("schedule_endpoints", err, tol, list(Ts) + ": |beta_1 - 1e-4|, |beta_T - 2e-2|");
}

CheckResult check_schedule_linearity(const std::vector<int>& Ts, double tol) {
  double err = 0;
  for (int T : Ts) {
    const Schedule s(T);
    for (int t = 2; t < T; ++t) err = std::max(err, std::abs(s.beta(t + 1) - 2 * s.beta(t) + s.beta(t - 1)));
  }
  return make_result("schedule_linearity", err, tol, list(Ts) + ": max |second difference of beta|");
}

CheckResult check_alpha_bar_recurrence(const std::vector<int>& Ts, double tol) {
  double err = 0;
  for (int T : Ts) {
    const Schedule s(T);
    err = std::max(err, std::abs(s.alpha_bar(1) - s.alpha(1)) / s.alpha_bar(1));
    for (int t = 2; t <= T; ++t) {
      const double expect = s.alpha_bar(t - 1) * (1.0 - s.beta(t));
      err = std::max(err, std::abs(s.alpha_bar(t) - expect) / s.alpha_bar(t));
    }
  }
  return make_result("alpha_bar_recurrence", err, tol, list(Ts) + ": relative |abar_t - abar_{t-1}(1 - beta_t)|");
}

CheckResult check_beta_tilde(const std::vector<int>& Ts, double tol) {
  double err = 0;
  bool bounded = true;
  for (int T : Ts) {
    const Schedule s(T);
    err = std::max(err, std::abs(s.beta_tilde(1)));
    for (int t = 1; t <= T; ++t) {
      const double expect = (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t)) * s.beta(t);
      err = std::max({err, std::abs(s.beta_tilde(t) - expect), std::abs(s.sigma_sq(t) - s.beta_tilde(t))});
      bounded = bounded && s.beta_tilde(t) >= 0 && s.beta_tilde(t) <= s.beta(t);
    }
  }
  auto r = make_result("posterior_variance", err, tol, list(Ts) + ": beta_tilde formula, beta_tilde_1 = 0, 0 <= beta_tilde <= beta");
  r.passed = r.passed && bounded;
  return r;
}

CheckResult check_coefficient_identity(const std::vector<int>& Ts) {
  double err = 0;
  for (int T : Ts) {
    const Schedule s(T);
    for (int t = 1; t <= T; ++t) err = std::max(err, std::abs(s.beta(t) - (1.0 - s.alpha(t))));
  }
  return make_result("beta_equals_one_minus_alpha", err, 0.0, list(Ts) + ": bitwise");
}

CheckResult check_forward_consistency(int T, std::size_t draws, std::uint64_t seed, double max_z) {
  const Schedule s(T);
  Rng rng(seed);
  const Shape shape{1, 1, draws};
  const double x0v = 0.6;
  const auto x0 = Tensor<double>::full(shape, x0v);
  auto x = x0;
  double worst = 0;
  for (int t = 1; t <= T; ++t) {
    x = q_sample_step(x, t, gaussian<double>(rng, shape), s);
    const auto closed = q_sample_closed(x0, t, gaussian<double>(rng, shape), s);
    const double mean = std::sqrt(s.alpha_bar(t)) * x0v, var = 1.0 - s.alpha_bar(t);
    const auto mi = moments(x), mc = moments(closed);
    worst = std::max({worst, moment_z(mi, mean, var, draws), moment_z(mc, mean, var, draws),
                      std::abs(mi.mean - mc.mean) / std::sqrt(2 * var / static_cast<double>(draws))});
  }
  return make_result("forward_closed_vs_iterated", worst, max_z,
                     "T=" + std::to_string(T) + ", " + std::to_string(draws) + " draws, max z-score");
}

CheckResult check_posterior_mean(const Schedule& impl, std::size_t cases_per_t, std::uint64_t seed, double tol) {
  const int T = impl.T();
  const OracleTable o(T);
  Rng rng(seed);
  const Shape shape{1, 1, 4};
  double err = 0;
  for (int t = 1; t <= T; ++t) {
    const long double ab = o.alpha_bar[t], ab_prev = o.alpha_bar[t - 1], b = o.beta[t];
    const long double c0 = std::sqrt(ab_prev) * b / (1 - ab);
    const long double ct = std::sqrt(1 - b) * (1 - ab_prev) / (1 - ab);
    for (std::size_t c = 0; c < cases_per_t; ++c) {
      const auto x0 = random_tensor(rng, shape, -1, 1);
      const auto eps = gaussian<double>(rng, shape);
      Tensor<double> x_t(shape), expect(shape);
      for (std::size_t i = 0; i < x_t.size(); ++i) {
        const long double xt = std::sqrt(ab) * x0[i] + std::sqrt(1 - ab) * eps[i];
        x_t[i] = static_cast<double>(xt);
        expect[i] = static_cast<double>(c0 * x0[i] + ct * xt);
      }
      const auto got = posterior_mean(x_t, eps, t, impl);
      err = std::max(err, max_abs_diff(got.mean, expect));
      const long double bt = (1 - ab_prev) / (1 - ab) * b;
      err = std::max(err, static_cast<double>(std::abs(got.variance_scalar - bt)));
    }
  }
  return make_result("posterior_mean_oracle", err, tol,
                     "T=" + std::to_string(T) + ", " + std::to_string(cases_per_t) + " cases per t");
}

CheckResult check_residual_identity(std::size_t pairs, std::uint64_t seed, double tol) {
  Rng rng(seed);
  const Shape shape{1, 16, 16};
  double err = 0;
  for (std::size_t k = 0; k < pairs; ++k) {
    const auto x0 = random_tensor(rng, shape, -1, 1).cast<float>();
    const auto x_hat = random_tensor(rng, shape, -1, 1).cast<float>();
    const auto s = make_residual_sample(x0, x0, x_hat);
    err = std::max(err, static_cast<double>(max_abs_diff(combine(s.x_bar, s.x_hat), x0)));
  }
  return make_result("residual_ensemble_identity", err, tol, std::to_string(pairs) + " pairs, float32");
}

CheckResult check_reverse_step_mean(int T, std::uint64_t seed) {
  const Schedule s(T);
  Rng rng(seed);
  const Shape shape{1, 4, 4};
  double err = 0;
  for (int t = 2; t <= T; ++t) {
    const auto x = gaussian<double>(rng, shape), e = gaussian<double>(rng, shape);
    err = std::max(err, max_abs_diff(reverse_step(x, e, t, Tensor<double>(shape), s), posterior_mean(x, e, t, s).mean));
  }
  const auto x = gaussian<double>(rng, shape), e = gaussian<double>(rng, shape);
  err = std::max(err, max_abs_diff(final_step(x, e, s), posterior_mean(x, e, 1, s).mean));
  return make_result("reverse_step_zero_noise", err, 0.0, "T=" + std::to_string(T) + ": equals posterior mean bitwise");
}

CheckResult check_oracle_denoiser(int T, std::uint64_t seed, double tol) {
  const Schedule s(T);
  Rng rng(seed);
  const Shape shape{1, 8, 8};
  const auto x0 = random_tensor(rng, shape, -1, 1);
  const OracleTable o(T);
  EpsilonPredictor<double> oracle = [&](const Tensor<double>& x_t, const Tensor<double>&, int t) {
    Tensor<double> eps(x_t.shape());
    const long double ab = o.alpha_bar[t];
    for (std::size_t i = 0; i < eps.size(); ++i) {
      eps[i] = static_cast<double>((x_t[i] - std::sqrt(ab) * x0[i]) / std::sqrt(1 - ab));
    }
    return eps;
  };
  const auto out = sample(oracle, x0, shape, s, rng, SampleOptions{false});
  return make_result("oracle_denoiser_recovery", max_abs_diff(out, x0), tol, "T=" + std::to_string(T) + ", z = 0");
}

CheckResult check_sampler_variance(int T, std::size_t draws, std::uint64_t seed, double max_z) {
  const Schedule s(T);
  Rng rng(seed);
  const Shape shape{1, 1, draws};
  EpsilonPredictor<double> zero = [](const Tensor<double>& x, const Tensor<double>&, int) {
    return Tensor<double>(x.shape());
  };
  const auto out = sample(zero, Tensor<double>(shape), shape, s, rng);
  double v = 1.0;
  for (int t = T; t >= 2; --t) v = v / s.alpha(t) + s.beta_tilde(t);
  v /= s.alpha(1);
  const double z = moment_z(moments(out), 0.0, v, draws);
  return make_result("sampler_variance", z, max_z, "T=" + std::to_string(T) + ", zero predictor, z-score");
}

CheckResult check_denoiser_gradient(const DenoiserConfig& cfg, std::size_t coords, double h, std::uint64_t seed,
                                    double tol, double floor) {
  Denoiser<double> model(cfg, seed);
  Rng rng(Rng::derive(seed, 1).next_u64());
  const Shape state{cfg.state_channels, 16, 16}, cond_shape{cfg.cond_channels, 16, 16};
  const auto x_t = gaussian<double>(rng, state);
  const auto cond = random_tensor(rng, cond_shape, -1, 1);
  const auto eps = gaussian<double>(rng, state);
  const int t = static_cast<int>(rng.uniform_int(1, cfg.T));

  Graph<double> g;
  auto b = g.bind(model.parameters());
  auto loss = g.mse(g.constant(eps), model.forward(g, b, g.constant(x_t), g.constant(cond), t));
  const auto analytic = grad(g, loss, b);

  double worst = 0;
  auto& params = model.parameters();
  for (std::size_t k = 0; k < coords; ++k) {
    const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(params.numel()) - 1));
    const double w = params.coordinate(i);
    params.set_coordinate(i, w + h);
    const double up = training_loss(eps, model.predict(x_t, cond, t));
    params.set_coordinate(i, w - h);
    const double down = training_loss(eps, model.predict(x_t, cond, t));
    params.set_coordinate(i, w);
    const double numeric = (up - down) / (2 * h);
    const double a = analytic[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor}));
  }
  char hs[32];
  std::snprintf(hs, sizeof hs, "%g", h);
  return make_result("denoiser_gradient", worst, tol,
                     std::to_string(coords) + " coordinates, h=" + hs + ", float64, relative error");
}

CheckResult check_training_loss(std::uint64_t seed) {
  Rng rng(seed);
  double err = 0;
  for (int k = 0; k < 20; ++k) {
    const Shape shape{1, 1 + static_cast<std::size_t>(rng.uniform_int(0, 7)), 5};
    const auto a = gaussian<double>(rng, shape), b = gaussian<double>(rng, shape);
    long double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += (static_cast<long double>(a[i]) - b[i]) * (a[i] - b[i]);
    const double expect = static_cast<double>(acc / a.size());
    err = std::max(err, std::abs(training_loss(a, b) - expect) / expect);
  }
  return make_result("training_loss_mean", err, 1e-13, "relative to an extended-precision mean");
}

CheckResult check_metric_identities(std::uint64_t seed) {
  Rng rng(seed);
  const Shape shape{1, 8, 8};
  double err = 0;
  auto mask = [&](double p) {
    Tensor<double> m(shape);
    for (auto& v : m.data()) v = rng.uniform() < p ? 1.0 : -1.0;
    return m;
  };
  for (int k = 0; k < 100; ++k) {
    const auto a = mask(0.4), b = mask(0.4);
    const double j = iou(a, b);
    err = std::max({err, std::abs(dice(a, b) - 2 * j / (1 + j)), std::abs(iou(a, a) - 1.0)});
  }
  const auto empty = Tensor<double>::full(shape, -1.0);
  err = std::max({err, std::abs(iou(empty, empty) - 1), std::abs(dice(empty, empty) - 1)});
  return make_result("metric_identities", err, 1e-12, "dice = 2 iou / (1 + iou); empty masks score 1");
}

CheckResult check_rng_streams(std::uint64_t seed) {
  auto a = Rng::derive(seed, 7), b = Rng::derive(seed, 7), c = Rng::derive(seed, 8);
  double mismatch = 0;
  bool distinct = false;
  for (int i = 0; i < 1000; ++i) {
    const auto x = a.next_u64(), y = b.next_u64(), z = c.next_u64();
    mismatch += x != y;
    distinct = distinct || x != z;
  }
  Rng g(seed);
  const std::size_t n = 100000;
  const double zscore = moment_z(moments(gaussian<double>(g, {n})), 0.0, 1.0, n);
  auto r = make_result("rng_streams", std::max(mismatch, zscore), 4.0,
                       "same stream replays, distinct streams differ, normal moments z-score");
  r.passed = r.passed && mismatch == 0 && distinct;
  return r;
}

CheckResult check_checkpoint_roundtrip(std::uint64_t seed) {
  E2EModel<float> model(E2EConfig{}, seed);
  RunConfig cfg;
  auto ckpt = make_checkpoint("e2e", model.parameters(), cfg);
  auto bytes = encode_checkpoint(ckpt);
  E2EModel<float> other(E2EConfig{}, seed + 1);
  load_parameters(decode_checkpoint(bytes), other.parameters());
  double err = other.parameters() == model.parameters() ? 0.0 : 1.0;

  auto tampered = bytes;
  tampered[tampered.size() / 2] ^= 1;
  try {
    decode_checkpoint(tampered);
    err += 1;
  } catch (const CheckpointError&) {
  }
  E2EModel<double> wide(E2EConfig{}, seed);
  try {
    load_parameters(decode_checkpoint(bytes), wide.parameters());
    err += 1;
  } catch (const PrecisionError&) {
  }
  return make_result("checkpoint_roundtrip", err, 0.0, "bit-exact reload, tamper and precision mismatch rejected");
}

CheckResult check_mutation_detected(std::uint64_t seed) {
  const auto inner = check_posterior_mean(mutated_schedule(50), 10, seed);
  CheckResult r{"mutation_alpha_for_alpha_bar", inner.error, inner.tolerance, !inner.passed,
                "posterior check on a schedule with alpha_t in place of alpha_bar_t must fail"};
  return r;
}

std::vector<CheckResult> run_verification(std::uint64_t seed, bool inject_fault) {
  const std::vector<int> Ts{2, 3, 10, 100, 1000};
  std::vector<CheckResult> out;
  out.push_back(check_schedule_endpoints(Ts));
  out.push_back(check_schedule_linearity(Ts));
  out.push_back(check_alpha_bar_recurrence(Ts));
  out.push_back(check_beta_tilde(Ts));
  out.push_back(check_coefficient_identity(Ts));
  out.push_back(check_forward_consistency(10, 100000, seed));
  out.push_back(check_posterior_mean(inject_fault ? mutated_schedule(50) : Schedule(50), 100, seed));
  out.push_back(check_residual_identity(1000, seed));
  out.push_back(check_reverse_step_mean(100, seed));
  out.push_back(check_oracle_denoiser(5, seed));
  out.push_back(check_sampler_variance(5, 20000, seed));
  out.push_back(check_denoiser_gradient(DenoiserConfig{}, 20, 1e-4, seed));
  out.push_back(check_training_loss(seed));
  out.push_back(check_metric_identities(seed));
  out.push_back(check_rng_streams(seed));
  out.push_back(check_checkpoint_roundtrip(seed));
  out.push_back(check_mutation_detected(seed));
  return out;
}

std::string format_check(const CheckResult& r) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "error=%.3e tol=%.3e", r.error, r.tolerance);
  return std::string(r.passed ? "PASS " : "FAIL ") + r.name + " " + buf + " (" + r.detail + ")";
}

}  // namespace rsddpm
