#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace rsddpm {

struct StepScalars {
  double beta;
  double alpha;
  double alpha_bar;
  double beta_tilde;
  double sigma_sq;
};

/// Per-timestep scalars of the linear-beta forward process, held in 64-bit.
///
/// Timesteps are 1-based: t = 1..T. Index 0 of every array is unused.
/// alpha_bar(0) is taken as 1, so beta_tilde(1) == 0 and the last reverse step
/// adds no noise.
class Schedule {
 public:
  static constexpr double kBetaStart = 1e-4;
  static constexpr double kBetaEnd = 2e-2;
  static constexpr const char* kAlgorithm = "linear-eq24";

  /// Throws std::invalid_argument for T < 2 (the affine formula divides by T - 1).
  explicit Schedule(int T);

  int T() const noexcept { return T_; }

  /// Throws std::out_of_range unless 1 <= t <= T.
  StepScalars lookup(int t) const;

  double beta(int t) const { return beta_.at(checked(t)); }
  double alpha(int t) const { return alpha_.at(checked(t)); }
  /// Accepts t = 0 and returns 1.
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bar_.at(checked(t)); }
  double beta_tilde(int t) const { return beta_tilde_.at(checked(t)); }
  double sigma_sq(int t) const { return sigma_sq_.at(checked(t)); }

  /// Overrides for fault-injection tests: replaces the stored cumulative
  /// products without recomputing anything else.
  void overwrite_alpha_bar(const std::vector<double>& values);

 private:
  std::size_t checked(int t) const;

  int T_;
  std::vector<double> beta_, alpha_, alpha_bar_, beta_tilde_, sigma_sq_;
};

inline Schedule make_schedule(int T) { return Schedule(T); }

}  // namespace rsddpm
