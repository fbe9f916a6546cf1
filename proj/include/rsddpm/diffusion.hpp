#pragma once

#include <functional>

#include "rsddpm/rng.hpp"
#include "rsddpm/schedule.hpp"
#include "rsddpm/tensor.hpp"

namespace rsddpm {

template <class Real>
struct PosteriorParams {
  Tensor<Real> mean;
  double variance_scalar = 0.0;  // isotropic: Sigma = variance_scalar * I
};

/// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <class Real>
Tensor<Real> q_sample_closed(const Tensor<Real>& x0, int t, const Tensor<Real>& eps, const Schedule& s);

/// sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps
template <class Real>
Tensor<Real> q_sample_step(const Tensor<Real>& x_prev, int t, const Tensor<Real>& eps, const Schedule& s);

/// mu = (x_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_pred) / sqrt(alpha_t), variance sigma_t^2.
template <class Real>
PosteriorParams<Real> posterior_mean(const Tensor<Real>& x_t, const Tensor<Real>& eps_pred, int t,
                                     const Schedule& s);

/// One noisy reverse step, valid for t >= 2:
///   x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_pred) / sqrt(alpha_t) + sqrt(beta_tilde_t) z
/// t == 1 must go through final_step(); passing it here throws.
template <class Real>
Tensor<Real> reverse_step(const Tensor<Real>& x_t, const Tensor<Real>& eps_pred, int t, const Tensor<Real>& z,
                          const Schedule& s);

/// Noise-free last step from x_1 to x_0.
template <class Real>
Tensor<Real> final_step(const Tensor<Real>& x1, const Tensor<Real>& eps_pred, const Schedule& s);

/// Mean squared error over all elements.
template <class Real>
Real training_loss(const Tensor<Real>& eps, const Tensor<Real>& eps_pred);

/// eps_theta(x_t, I0, t)
template <class Real>
using EpsilonPredictor = std::function<Tensor<Real>(const Tensor<Real>& x_t, const Tensor<Real>& cond, int t)>;

struct SampleOptions {
  /// When false, every z is zero. The z draws are still consumed so the
  /// stream position matches a stochastic run.
  bool add_noise = true;
};

/// Ancestral sampling: x_T ~ N(0, I), reverse_step for t = T..2, final_step.
template <class Real>
Tensor<Real> sample(const EpsilonPredictor<Real>& predictor, const Tensor<Real>& cond, const Shape& state_shape,
                    const Schedule& s, Rng& rng, SampleOptions options = {});

}  // namespace rsddpm
