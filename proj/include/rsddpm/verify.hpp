#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rsddpm/models.hpp"
#include "rsddpm/schedule.hpp"

namespace rsddpm {

/// One named self-check. passed means error <= tolerance.
struct CheckResult {
  std::string name;
  double error = 0;
  double tolerance = 0;
  bool passed = false;
  std::string detail;
};

CheckResult make_result(std::string name, double error, double tolerance, std::string detail = {});

/// Schedule whose alpha_bar table holds alpha_t instead of the cumulative
/// product. Used to show that the posterior check catches the swap.
Schedule mutated_schedule(int T);

CheckResult check_schedule_endpoints(const std::vector<int>& Ts, double tol = 1e-15);
CheckResult check_schedule_linearity(const std::vector<int>& Ts, double tol = 1e-12);
CheckResult check_alpha_bar_recurrence(const std::vector<int>& Ts, double tol = 1e-15);
CheckResult check_beta_tilde(const std::vector<int>& Ts, double tol = 1e-15);
CheckResult check_coefficient_identity(const std::vector<int>& Ts);

/// Iterated one-step noising against the closed form: per t, the largest
/// deviation of the sample mean and variance in units of their standard error.
CheckResult check_forward_consistency(int T, std::size_t draws, std::uint64_t seed, double max_z = 4.0);

/// posterior_mean() fed the true eps against the Gaussian posterior of
/// q(x_{t-1} | x_t, x0) computed from an independent schedule table.
CheckResult check_posterior_mean(const Schedule& impl, std::size_t cases_per_t, std::uint64_t seed,
                                 double tol = 1e-6);

/// combine(x_bar0, x_hat) == x0 for random pairs in f32.
CheckResult check_residual_identity(std::size_t pairs, std::uint64_t seed, double tol = 1e-6);

CheckResult check_reverse_step_mean(int T, std::uint64_t seed);
/// Sampler with the analytic eps and z = 0 recovers x0.
CheckResult check_oracle_denoiser(int T, std::uint64_t seed, double tol = 1e-3);
/// Zero predictor: sample variance of x0 against the variance recursion.
CheckResult check_sampler_variance(int T, std::size_t draws, std::uint64_t seed, double max_z = 4.0);

/// Analytic gradient of the eps-loss against central differences on random
/// coordinates of a float64 denoiser. Relative error |a - n| / max(|a|, |n|, floor).
CheckResult check_denoiser_gradient(const DenoiserConfig& cfg, std::size_t coords, double h, std::uint64_t seed,
                                    double tol = 1e-5, double floor = 1e-8);

CheckResult check_training_loss(std::uint64_t seed);
CheckResult check_metric_identities(std::uint64_t seed);
CheckResult check_rng_streams(std::uint64_t seed);
CheckResult check_checkpoint_roundtrip(std::uint64_t seed);

/// Posterior check run against mutated_schedule(); passes when that check fails.
CheckResult check_mutation_detected(std::uint64_t seed);

/// The full suite used by `rsddpm verify`. With inject_fault the posterior
/// check itself runs on the mutated schedule.
std::vector<CheckResult> run_verification(std::uint64_t seed, bool inject_fault = false);

std::string format_check(const CheckResult& r);

}  // namespace rsddpm
