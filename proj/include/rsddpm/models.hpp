#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "rsddpm/autograd.hpp"
#include "rsddpm/optimizer.hpp"
#include "rsddpm/rng.hpp"

namespace rsddpm {

struct DenoiserConfig {
  std::size_t state_channels = 1;  // channels of x_bar
  std::size_t cond_channels = 1;   // channels of I0
  std::size_t base_channels = 16;
  std::size_t time_embed_dim = 32;
  std::size_t groups = 4;
  int T = 100;  // valid timesteps are 1..T
};

struct E2EConfig {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t base_channels = 8;
  std::size_t groups = 2;
};

/// Sinusoidal embedding of a timestep: [sin(t f_0) .. sin(t f_{d/2-1}), cos(...)]
/// with f_i = 10000^(-i / (d/2)).
template <class Real>
Tensor<Real> timestep_embedding(int t, std::size_t dim);

namespace detail {

/// Named-block bookkeeping shared by both networks.
template <class Real>
class LayerTable {
 public:
  void conv(ParameterSet<Real>& ps, Rng& rng, const std::string& name, std::size_t c_in, std::size_t c_out,
            double gain = 1.0);
  void norm(ParameterSet<Real>& ps, const std::string& name, std::size_t channels);
  void dense(ParameterSet<Real>& ps, Rng& rng, const std::string& name, std::size_t in, std::size_t out,
             double gain = 1.0);
  std::size_t operator()(const std::string& block) const { return index_.at(block); }

 private:
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace detail

/// Conditional noise predictor eps_theta(x_bar_t, I0, t).
///
/// x_bar_t and I0 are concatenated along channels and run through a two-level
/// encoder-decoder with skip connections. Each residual block gets a learned
/// projection of the sinusoidal time embedding added to its hidden activations.
/// Spatial dims must be divisible by 4.
template <class Real>
class Denoiser {
 public:
  using Var = typename Graph<Real>::Var;
  using Binding = typename Graph<Real>::Binding;

  Denoiser(DenoiserConfig config, std::uint64_t seed);

  const DenoiserConfig& config() const noexcept { return config_; }
  ParameterSet<Real>& parameters() noexcept { return params_; }
  const ParameterSet<Real>& parameters() const noexcept { return params_; }

  Var forward(Graph<Real>& g, const Binding& b, Var x_t, Var cond, int t) const;

  /// Untracked forward pass.
  Tensor<Real> predict(const Tensor<Real>& x_t, const Tensor<Real>& cond, int t) const;

 private:
  Var res_block(Graph<Real>& g, const Binding& b, const std::string& name, Var x, Var temb) const;

  DenoiserConfig config_;
  ParameterSet<Real> params_;
  detail::LayerTable<Real> layers_;
};

/// End-to-end segmentation learner. Output is tanh of the logits, which equals
/// 2p - 1 for the per-pixel foreground probability p = sigmoid(2 * logit).
template <class Real>
class E2EModel {
 public:
  using Var = typename Graph<Real>::Var;
  using Binding = typename Graph<Real>::Binding;

  E2EModel(E2EConfig config, std::uint64_t seed);

  const E2EConfig& config() const noexcept { return config_; }
  ParameterSet<Real>& parameters() noexcept { return params_; }
  const ParameterSet<Real>& parameters() const noexcept { return params_; }

  bool frozen() const noexcept { return params_.frozen(); }
  void freeze() noexcept { params_.freeze(); }

  Var forward(Graph<Real>& g, const Binding& b, Var image) const;
  Tensor<Real> predict(const Tensor<Real>& image) const;

 private:
  Var res_block(Graph<Real>& g, const Binding& b, const std::string& name, Var x) const;

  E2EConfig config_;
  ParameterSet<Real> params_;
  detail::LayerTable<Real> layers_;
};

/// Returns the model with its parameters frozen.
template <class Real>
E2EModel<Real> freeze(E2EModel<Real> model) {
  model.freeze();
  return model;
}

struct TrainConfig {
  int steps = 1000;
  std::size_t batch = 16;
  AdamConfig adam;
  int eval_every = 50;
  /// Stop after this many evaluations without improvement; 0 disables.
  int patience = 0;
  std::size_t threads = 1;
};

struct TrainRecord {
  int step = 0;
  double loss = 0.0;       // mean batch loss at this step
  double eval_loss = -1;   // negative when no evaluation happened at this step
  double wall_seconds = 0;
};

using TrainLogger = std::function<void(const TrainRecord&)>;

template <class Real>
struct SupervisedPair {
  Tensor<Real> input;
  Tensor<Real> target;  // encoded mask in {-1, +1}
};

struct E2ETrainResult {
  std::vector<double> eval_losses;
  int steps_run = 0;
};

/// Per-pixel regression of the E2E output onto the encoded mask, Adam updates,
/// shuffled epochs. Evaluation loss is the mean over eval_set (the training set
/// when eval_set is empty). Throws on an empty training set or a frozen model.
template <class Real>
E2ETrainResult train_e2e(E2EModel<Real>& model, const std::vector<SupervisedPair<Real>>& train_set,
                         const std::vector<SupervisedPair<Real>>& eval_set, const TrainConfig& config, Rng& rng,
                         const TrainLogger& log = {});

extern template class Denoiser<float>;
extern template class Denoiser<double>;
extern template class E2EModel<float>;
extern template class E2EModel<double>;

}  // namespace rsddpm
