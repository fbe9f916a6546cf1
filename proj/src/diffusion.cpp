#include "rsddpm/diffusion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace rsddpm {

template <class Real>
Tensor<Real> q_sample_closed(const Tensor<Real>& x0, int t, const Tensor<Real>& eps, const Schedule& s) {
  require_same_shape(x0.shape(), eps.shape(), "q_sample_closed");
  const double abar = s.lookup(t).alpha_bar;
  return axpby(static_cast<Real>(std::sqrt(abar)), x0, static_cast<Real>(std::sqrt(1.0 - abar)), eps);
}

template <class Real>
Tensor<Real> q_sample_step(const Tensor<Real>& x_prev, int t, const Tensor<Real>& eps, const Schedule& s) {
  require_same_shape(x_prev.shape(), eps.shape(), "q_sample_step");
  const double beta = s.beta(t);
  return axpby(static_cast<Real>(std::sqrt(1.0 - beta)), x_prev, static_cast<Real>(std::sqrt(beta)), eps);
}

template <class Real>
PosteriorParams<Real> posterior_mean(const Tensor<Real>& x_t, const Tensor<Real>& eps_pred, int t,
                                     const Schedule& s) {
  require_same_shape(x_t.shape(), eps_pred.shape(), "posterior_mean");
  const auto sc = s.lookup(t);
  const auto inv_sqrt_alpha = static_cast<Real>(1.0 / std::sqrt(sc.alpha));
  const auto coeff = static_cast<Real>((1.0 - sc.alpha) / std::sqrt(1.0 - sc.alpha_bar));
  Tensor<Real> mean(x_t.shape());
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = inv_sqrt_alpha * (x_t[i] - coeff * eps_pred[i]);
  return {std::move(mean), sc.sigma_sq};
}

template <class Real>
Tensor<Real> reverse_step(const Tensor<Real>& x_t, const Tensor<Real>& eps_pred, int t, const Tensor<Real>& z,
                          const Schedule& s) {
  if (t < 2) {
    throw std::invalid_argument("reverse_step: t = " + std::to_string(t) + " has no noisy step; use final_step");
  }
  require_same_shape(x_t.shape(), eps_pred.shape(), "reverse_step");
  require_same_shape(x_t.shape(), z.shape(), "reverse_step");
  const auto sc = s.lookup(t);
  const auto inv_sqrt_alpha = static_cast<Real>(1.0 / std::sqrt(sc.alpha));
  const auto coeff = static_cast<Real>(sc.beta / std::sqrt(1.0 - sc.alpha_bar));
  const auto sigma = static_cast<Real>(std::sqrt(sc.beta_tilde));
  Tensor<Real> out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Real mean = inv_sqrt_alpha * (x_t[i] - coeff * eps_pred[i]);
    out[i] = mean + sigma * z[i];
  }
  return out;
}

template <class Real>
Tensor<Real> final_step(const Tensor<Real>& x1, const Tensor<Real>& eps_pred, const Schedule& s) {
  require_same_shape(x1.shape(), eps_pred.shape(), "final_step");
  const auto sc = s.lookup(1);
  const auto inv_sqrt_alpha = static_cast<Real>(1.0 / std::sqrt(sc.alpha));
  const auto coeff = static_cast<Real>(sc.beta / std::sqrt(1.0 - sc.alpha_bar));
  Tensor<Real> out(x1.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = inv_sqrt_alpha * (x1[i] - coeff * eps_pred[i]);
  return out;
}

template <class Real>
Real training_loss(const Tensor<Real>& eps, const Tensor<Real>& eps_pred) {
  require_same_shape(eps.shape(), eps_pred.shape(), "training_loss");
  Real acc = 0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const Real d = eps[i] - eps_pred[i];
    acc += d * d;
  }
  return acc / static_cast<Real>(eps.size());
}

template <class Real>
Tensor<Real> sample(const EpsilonPredictor<Real>& predictor, const Tensor<Real>& cond, const Shape& state_shape,
                    const Schedule& s, Rng& rng, SampleOptions options) {
  auto x = gaussian<Real>(rng, state_shape);
  for (int t = s.T(); t >= 2; --t) {
    auto z = gaussian<Real>(rng, state_shape);
    if (!options.add_noise) z = Tensor<Real>(state_shape);
    auto eps = predictor(x, cond, t);
    x = reverse_step(x, eps, t, z, s);
  }
  auto eps = predictor(x, cond, 1);
  return final_step(x, eps, s);
}

#define RSDDPM_INSTANTIATE(Real)                                                                                  \
  template Tensor<Real> q_sample_closed(const Tensor<Real>&, int, const Tensor<Real>&, const Schedule&);        \
  template Tensor<Real> q_sample_step(const Tensor<Real>&, int, const Tensor<Real>&, const Schedule&);          \
  template PosteriorParams<Real> posterior_mean(const Tensor<Real>&, const Tensor<Real>&, int, const Schedule&); \
  template Tensor<Real> reverse_step(const Tensor<Real>&, const Tensor<Real>&, int, const Tensor<Real>&,        \
                                     const Schedule&);                                                            \
  template Tensor<Real> final_step(const Tensor<Real>&, const Tensor<Real>&, const Schedule&);                  \
  template Real training_loss(const Tensor<Real>&, const Tensor<Real>&);                                         \
  template Tensor<Real> sample(const EpsilonPredictor<Real>&, const Tensor<Real>&, const Shape&, const Schedule&, \
                               Rng&, SampleOptions);

RSDDPM_INSTANTIATE(float)
RSDDPM_INSTANTIATE(double)

#undef RSDDPM_INSTANTIATE

}  // namespace rsddpm
