#include "rsddpm/schedule.hpp"

#include <stdexcept>
#include <string>

namespace rsddpm {

Schedule::Schedule(int T) : T_(T) {
  if (T < 2) {
    throw std::invalid_argument("schedule: T must be >= 2 (beta_t = (1e-4 (T-t) + 2e-2 (t-1)) / (T-1) divides by T-1), got " +
                                std::to_string(T));
  }
  const auto n = static_cast<std::size_t>(T) + 1;
  beta_.assign(n, 0.0);
  alpha_.assign(n, 0.0);
  alpha_bar_.assign(n, 0.0);
  beta_tilde_.assign(n, 0.0);
  sigma_sq_.assign(n, 0.0);

  const double denom = static_cast<double>(T - 1);
  double running = 1.0;
  for (int t = 1; t <= T; ++t) {
    const auto i = static_cast<std::size_t>(t);
    const double affine = (kBetaStart * static_cast<double>(T - t) + kBetaEnd * static_cast<double>(t - 1)) / denom;
    alpha_[i] = 1.0 - affine;
    // 1 - alpha is exact here (Sterbenz), so storing it keeps beta_t == 1 - alpha_t bit-for-bit.
    beta_[i] = 1.0 - alpha_[i];
    const double prev = running;
    running *= alpha_[i];
    alpha_bar_[i] = running;
    beta_tilde_[i] = (1.0 - prev) / (1.0 - running) * beta_[i];
    sigma_sq_[i] = beta_tilde_[i];
  }
}

std::size_t Schedule::checked(int t) const {
  if (t < 1 || t > T_) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T_) + "]");
  }
  return static_cast<std::size_t>(t);
}

StepScalars Schedule::lookup(int t) const {
  const auto i = checked(t);
  return {beta_[i], alpha_[i], alpha_bar_[i], beta_tilde_[i], sigma_sq_[i]};
}

void Schedule::overwrite_alpha_bar(const std::vector<double>& values) {
  if (values.size() != alpha_bar_.size()) throw std::invalid_argument("overwrite_alpha_bar: length mismatch");
  alpha_bar_ = values;
}

}  // namespace rsddpm
