#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "rsddpm/autograd.hpp"

namespace rsddpm {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class Real>
struct AdamState {
  std::vector<Real> m;
  std::vector<Real> v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
///   p <- p - lr * (m / (1-b1^k)) / (sqrt(v / (1-b2^k)) + eps)
/// Throws std::logic_error for frozen parameter sets and ShapeError when the
/// gradient is not aligned with the parameters.
template <class Real>
void adam_step(ParameterSet<Real>& params, const Gradient<Real>& grad, AdamState<Real>& state,
               const AdamConfig& cfg) {
  if (params.frozen()) throw std::logic_error("optimizer step on a frozen model");
  const std::size_t n = params.numel();
  if (grad.size() != n) {
    throw ShapeError("adam_step: gradient has " + std::to_string(grad.size()) + " entries, parameters have " +
                     std::to_string(n));
  }
  if (state.m.empty()) {
    state.m.assign(n, Real(0));
    state.v.assign(n, Real(0));
  }
  if (state.m.size() != n) throw ShapeError("adam_step: optimizer state does not match parameters");

  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const Real b1 = static_cast<Real>(cfg.beta1), b2 = static_cast<Real>(cfg.beta2);

  std::size_t offset = 0;
  for (std::size_t blk = 0; blk < params.count(); ++blk) {
    auto& value = params.mutable_value(blk);
    for (std::size_t i = 0; i < value.size(); ++i, ++offset) {
      const Real g = grad[offset];
      state.m[offset] = b1 * state.m[offset] + (Real(1) - b1) * g;
      state.v[offset] = b2 * state.v[offset] + (Real(1) - b2) * g * g;
      const double m_hat = static_cast<double>(state.m[offset]) / bc1;
      const double v_hat = static_cast<double>(state.v[offset]) / bc2;
      value[i] -= static_cast<Real>(cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
    }
  }
}

}  // namespace rsddpm
