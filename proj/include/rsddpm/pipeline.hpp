#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rsddpm/data.hpp"
#include "rsddpm/diffusion.hpp"
#include "rsddpm/metrics.hpp"
#include "rsddpm/models.hpp"

namespace rsddpm {

/// R = x_hat - x0
template <class Real>
Tensor<Real> residual(const Tensor<Real>& x_hat, const Tensor<Real>& x0) {
  require_same_shape(x_hat.shape(), x0.shape(), "residual");
  return x_hat - x0;
}

/// x_bar = x0 - R
template <class Real>
Tensor<Real> residual_target(const Tensor<Real>& x0, const Tensor<Real>& r) {
  require_same_shape(x0.shape(), r.shape(), "residual_target");
  return x0 - r;
}

/// (x_bar + x_hat) / 2
template <class Real>
Tensor<Real> combine(const Tensor<Real>& x_bar, const Tensor<Real>& x_hat) {
  require_same_shape(x_bar.shape(), x_hat.shape(), "combine");
  Tensor<Real> out(x_bar.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = Real(0.5) * (x_bar[i] + x_hat[i]);
  return out;
}

/// Restoration residual R = I0 - x0; no end-to-end model involved.
template <class Real>
Tensor<Real> direct_residual(const Tensor<Real>& image, const Tensor<Real>& x0) {
  require_same_shape(image.shape(), x0.shape(), "direct_residual");
  return image - x0;
}

template <class Real>
struct ResidualSample {
  Tensor<Real> image;  // I0
  Tensor<Real> x0;
  Tensor<Real> x_hat;
  Tensor<Real> r;
  Tensor<Real> x_bar;
};

/// Builds the diffusion target for one pair. x_hat is the E2E output in
/// segmentation mode; in restoration mode it is I0 itself, so R = I0 - x0.
template <class Real>
ResidualSample<Real> make_residual_sample(const Tensor<Real>& image, const Tensor<Real>& x0,
                                          const Tensor<Real>& x_hat) {
  ResidualSample<Real> s{image, x0, x_hat, residual(x_hat, x0), {}};
  s.x_bar = residual_target(x0, s.r);
  return s;
}

template <class Real>
struct EnsembleOutput {
  Tensor<Real> x_hat;
  Tensor<Real> x_bar;
  Tensor<Real> combined;
};

/// E2E outputs keyed by the SHA-256 of the input bytes.
template <class Real>
class E2ECache {
 public:
  const Tensor<Real>& get(const E2EModel<Real>& model, const Tensor<Real>& image);
  std::size_t hits() const noexcept { return hits_; }
  std::size_t misses() const noexcept { return misses_; }
  void reset_stats() noexcept { hits_ = misses_ = 0; }
  std::size_t size() const noexcept { return entries_.size(); }

 private:
  std::map<std::string, Tensor<Real>> entries_;
  std::size_t hits_ = 0, misses_ = 0;
};

struct DiffusionTrainConfig {
  TrainConfig train;
  /// Number of validation items used for the early-stopping loss.
  std::size_t val_items = 64;
  /// Decay of the exponential moving average of the weights; 0 disables it.
  /// When enabled, validation and the returned weights use the average.
  double ema_decay = 0;
};

struct DiffusionTrainResult {
  std::vector<double> val_losses;
  std::vector<double> epoch_losses;  // mean batch loss per completed epoch
  int steps_run = 0;
  std::size_t cache_hits = 0, cache_misses = 0;
  /// Lookups and hits counted from the second epoch on.
  std::size_t later_epoch_lookups = 0, later_epoch_hits = 0;
};

/// Residual-target training loop. Each step draws a batch of (I0, x0) pairs
/// from shuffled epochs over the train split and, per sample, an independent
/// t ~ U{1..T} and eps ~ N(0, I). x_bar_t is formed in closed form and the
/// denoiser takes an Adam step on mean ||eps - eps_theta(x_bar_t, I0, t)||^2.
///
/// e2e must be frozen when given. Passing nullptr selects the restoration
/// residual and requires a restoration dataset.
template <class Real>
DiffusionTrainResult train_diffusion(Denoiser<Real>& denoiser, const E2EModel<Real>* e2e, const Dataset<Real>& data,
                                     const Schedule& schedule, const DiffusionTrainConfig& config, Rng& rng,
                                     const TrainLogger& log = {}, E2ECache<Real>* cache = nullptr);

/// Mean epsilon-prediction loss over items with per-item fixed (t, eps).
template <class Real>
double diffusion_eval_loss(const Denoiser<Real>& denoiser, const E2EModel<Real>* e2e,
                           const std::vector<const DataItem<Real>*>& items, Mode mode, const Schedule& schedule,
                           std::size_t threads);

/// Samples x_bar_0 and combines it with x_hat (the E2E output, or I0 without
/// an E2E model).
template <class Real>
EnsembleOutput<Real> infer(const Denoiser<Real>& denoiser, const E2EModel<Real>* e2e, const Tensor<Real>& image,
                           const Schedule& schedule, Rng& rng, SampleOptions options = {});

struct SplitEvaluation {
  MetricReport baseline;   // E2E alone, or the identity (output = I0) in restoration mode
  MetricReport diffusion;  // x_bar_0 alone
  MetricReport ensemble;
};

/// Runs infer() on every item of a split with Rng::derive(seed, item.index) and
/// scores outputs clamped to [-1, 1] against the encoded target.
template <class Real>
SplitEvaluation evaluate_split(const Denoiser<Real>& denoiser, const E2EModel<Real>* e2e, const Dataset<Real>& data,
                               Split split, const Schedule& schedule, std::uint64_t seed, std::size_t threads,
                               std::vector<EnsembleOutput<Real>>* outputs = nullptr);

}  // namespace rsddpm
