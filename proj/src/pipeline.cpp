#include "rsddpm/pipeline.hpp"

#include <chrono>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "rsddpm/digest.hpp"
#include "rsddpm/parallel.hpp"

namespace rsddpm {

template <class Real>
const Tensor<Real>& E2ECache<Real>::get(const E2EModel<Real>& model, const Tensor<Real>& image) {
  Sha256 h;
  for (auto d : image.shape()) {
    const auto dim = static_cast<std::uint64_t>(d);
    h.update(&dim, sizeof dim);
  }
  h.update(image.data().data(), image.size() * sizeof(Real));
  const auto key = Sha256::hex(h.finish());
  if (auto it = entries_.find(key); it != entries_.end()) {
    ++hits_;
    return it->second;
  }
  ++misses_;
  return entries_.emplace(key, model.predict(image)).first->second;
}

namespace {

template <class Real>
void check_models(const E2EModel<Real>* e2e, Mode mode) {
  if (e2e) {
    if (!e2e->frozen()) throw std::logic_error("the end-to-end model must be frozen before diffusion training");
  } else if (mode != Mode::restoration) {
    throw std::invalid_argument(
        "segmentation mode needs a frozen end-to-end model; only restoration mode may omit it");
  }
}

// Per-item (t, eps) used for validation loss, fixed across calls.
template <class Real>
std::pair<int, Tensor<Real>> eval_draw(const DataItem<Real>& item, const Schedule& s, const Shape& shape) {
  auto rng = Rng::derive(0x76616c6964ULL, item.index);
  const auto t = static_cast<int>(rng.uniform_int(1, s.T()));
  return {t, gaussian<Real>(rng, shape)};
}

}  // namespace

template <class Real>
double diffusion_eval_loss(const Denoiser<Real>& denoiser, const E2EModel<Real>* e2e,
                           const std::vector<const DataItem<Real>*>& items, Mode mode, const Schedule& schedule,
                           std::size_t threads) {
  if (items.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::vector<double> losses(items.size());
  parallel_for(items.size(), threads, [&](std::size_t i) {
    const auto& item = *items[i];
    const auto x0 = encoded_target(item, mode);
    const auto x_hat = e2e ? e2e->predict(item.image) : item.image;
    const auto x_bar = residual_target(x0, residual(x_hat, x0));
    auto [t, eps] = eval_draw(item, schedule, x0.shape());
    const auto x_t = q_sample_closed(x_bar, t, eps, schedule);
    losses[i] = static_cast<double>(training_loss(eps, denoiser.predict(x_t, item.image, t)));
  });
  return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
}

template <class Real>
DiffusionTrainResult train_diffusion(Denoiser<Real>& denoiser, const E2EModel<Real>* e2e, const Dataset<Real>& data,
                                     const Schedule& schedule, const DiffusionTrainConfig& config, Rng& rng,
                                     const TrainLogger& log, E2ECache<Real>* cache) {
  check_models(e2e, data.mode);
  const auto& tc = config.train;
  if (tc.batch == 0 || tc.steps < 0) throw std::invalid_argument("train_diffusion: invalid batch/steps");
  if (schedule.T() != denoiser.config().T) {
    throw std::invalid_argument("train_diffusion: schedule T=" + std::to_string(schedule.T()) +
                                " does not match denoiser T=" + std::to_string(denoiser.config().T));
  }
  const auto train = data.split(Split::train);
  if (train.empty()) throw std::invalid_argument("train_diffusion: empty training split");
  auto val = data.split(Split::val);
  if (val.size() > config.val_items) val.resize(config.val_items);

  E2ECache<Real> local_cache;
  if (!cache) cache = &local_cache;

  std::vector<Tensor<Real>> targets;
  targets.reserve(train.size());
  for (const auto* it : train) targets.push_back(encoded_target(*it, data.mode));

  const auto start = std::chrono::steady_clock::now();
  DiffusionTrainResult result;
  AdamState<Real> state;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  int epoch = -1;
  double epoch_loss = 0;
  std::size_t epoch_batches = 0;

  double best = std::numeric_limits<double>::infinity();
  std::vector<Real> best_params;
  const auto decay = static_cast<Real>(config.ema_decay);
  std::vector<Real> ema;
  if (decay > 0) ema = denoiser.parameters().flatten();
  int stale = 0;

  struct Work {
    std::size_t item;
    int t;
    Tensor<Real> eps;
    Tensor<Real> x_t;
  };

  for (int step = 1; step <= tc.steps; ++step) {
    std::vector<Work> batch(tc.batch);
    for (auto& w : batch) {
      if (cursor == order.size()) {
        if (epoch >= 0 && epoch_batches) result.epoch_losses.push_back(epoch_loss / static_cast<double>(epoch_batches));
        epoch_loss = 0;
        epoch_batches = 0;
        for (std::size_t i = order.size(); i > 1; --i) {
          std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)))]);
        }
        cursor = 0;
        ++epoch;
      }
      w.item = order[cursor++];
      w.t = static_cast<int>(rng.uniform_int(1, schedule.T()));
      const auto& x0 = targets[w.item];
      w.eps = gaussian<Real>(rng, x0.shape());

      const auto& image = train[w.item]->image;
      Tensor<Real> x_hat;
      if (e2e) {
        const auto before = cache->hits();
        x_hat = cache->get(*e2e, image);
        if (epoch >= 1) {
          ++result.later_epoch_lookups;
          result.later_epoch_hits += cache->hits() - before;
        }
      } else {
        x_hat = image;
      }
      const auto x_bar = residual_target(x0, residual(x_hat, x0));
      w.x_t = q_sample_closed(x_bar, w.t, w.eps, schedule);
    }

    std::vector<Gradient<Real>> grads(batch.size());
    std::vector<double> losses(batch.size());
    parallel_for(batch.size(), tc.threads, [&](std::size_t i) {
      const auto& w = batch[i];
      Graph<Real> g;
      auto b = g.bind(denoiser.parameters());
      auto pred = denoiser.forward(g, b, g.constant(w.x_t), g.constant(train[w.item]->image), w.t);
      auto loss = g.mse(g.constant(w.eps), pred);
      losses[i] = static_cast<double>(g.value(loss)[0]);
      grads[i] = grad(g, loss, b);
    });
    Gradient<Real> total = std::move(grads[0]);
    for (std::size_t i = 1; i < grads.size(); ++i) total += grads[i];
    total *= Real(1) / static_cast<Real>(grads.size());
    adam_step(denoiser.parameters(), total, state, tc.adam);
    if (!ema.empty()) {
      const auto current = denoiser.parameters().flatten();
      for (std::size_t k = 0; k < ema.size(); ++k) ema[k] = decay * ema[k] + (Real(1) - decay) * current[k];
    }

    TrainRecord rec;
    rec.step = step;
    rec.loss = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
    epoch_loss += rec.loss;
    ++epoch_batches;
    if (!val.empty() && tc.eval_every > 0 && (step % tc.eval_every == 0 || step == tc.steps)) {
      std::vector<Real> live;
      if (!ema.empty()) {
        live = denoiser.parameters().flatten();
        denoiser.parameters().assign_flat(ema);
      }
      rec.eval_loss = diffusion_eval_loss(denoiser, e2e, val, data.mode, schedule, tc.threads);
      result.val_losses.push_back(rec.eval_loss);
      if (rec.eval_loss < best) {
        best = rec.eval_loss;
        best_params = ema.empty() ? denoiser.parameters().flatten() : ema;
        stale = 0;
      } else {
        ++stale;
      }
      if (!live.empty()) denoiser.parameters().assign_flat(live);
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (log) log(rec);
    result.steps_run = step;
    if (tc.patience > 0 && stale >= tc.patience) break;
  }
  if (epoch_batches) result.epoch_losses.push_back(epoch_loss / static_cast<double>(epoch_batches));
  if (!best_params.empty()) {
    denoiser.parameters().assign_flat(best_params);
  } else if (!ema.empty()) {
    denoiser.parameters().assign_flat(ema);
  }
  result.cache_hits = cache->hits();
  result.cache_misses = cache->misses();
  return result;
}

template <class Real>
EnsembleOutput<Real> infer(const Denoiser<Real>& denoiser, const E2EModel<Real>* e2e, const Tensor<Real>& image,
                           const Schedule& schedule, Rng& rng, SampleOptions options) {
  if (schedule.T() != denoiser.config().T) throw std::invalid_argument("infer: schedule and denoiser disagree on T");
  EnsembleOutput<Real> out;
  out.x_hat = e2e ? e2e->predict(image) : image;
  Shape state{denoiser.config().state_channels, image.dim(1), image.dim(2)};
  EpsilonPredictor<Real> predictor = [&denoiser](const Tensor<Real>& x_t, const Tensor<Real>& cond, int t) {
    return denoiser.predict(x_t, cond, t);
  };
  out.x_bar = sample(predictor, image, state, schedule, rng, options);
  out.combined = combine(out.x_bar, out.x_hat);
  return out;
}

template <class Real>
SplitEvaluation evaluate_split(const Denoiser<Real>& denoiser, const E2EModel<Real>* e2e, const Dataset<Real>& data,
                               Split split, const Schedule& schedule, std::uint64_t seed, std::size_t threads,
                               std::vector<EnsembleOutput<Real>>* outputs) {
  if (!e2e && data.mode == Mode::segmentation) {
    throw std::invalid_argument("evaluate_split: segmentation mode needs an end-to-end model");
  }
  const auto items = data.split(split);
  std::vector<EnsembleOutput<Real>> results(items.size());
  parallel_for(items.size(), threads, [&](std::size_t i) {
    auto rng = Rng::derive(seed, items[i]->index);
    results[i] = infer(denoiser, e2e, items[i]->image, schedule, rng);
  });

  SplitEvaluation ev;
  ev.baseline.method = e2e ? "e2e" : "identity";
  ev.diffusion.method = "diffusion";
  ev.ensemble.method = "ensemble";
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto truth = encoded_target(*items[i], data.mode);
    ev.baseline.add(score(clamp(results[i].x_hat, Real(-1), Real(1)), truth));
    ev.diffusion.add(score(clamp(results[i].x_bar, Real(-1), Real(1)), truth));
    ev.ensemble.add(score(clamp(results[i].combined, Real(-1), Real(1)), truth));
  }
  if (outputs) *outputs = std::move(results);
  return ev;
}

#define RSDDPM_INSTANTIATE(Real)                                                                                      \
  template class E2ECache<Real>;                                                                                      \
  template double diffusion_eval_loss(const Denoiser<Real>&, const E2EModel<Real>*,                                  \
                                      const std::vector<const DataItem<Real>*>&, Mode, const Schedule&, std::size_t); \
  template DiffusionTrainResult train_diffusion(Denoiser<Real>&, const E2EModel<Real>*, const Dataset<Real>&,        \
                                                const Schedule&, const DiffusionTrainConfig&, Rng&,                  \
                                                const TrainLogger&, E2ECache<Real>*);                                 \
  template EnsembleOutput<Real> infer(const Denoiser<Real>&, const E2EModel<Real>*, const Tensor<Real>&,            \
                                      const Schedule&, Rng&, SampleOptions);                                          \
  template SplitEvaluation evaluate_split(const Denoiser<Real>&, const E2EModel<Real>*, const Dataset<Real>&, Split, \
                                          const Schedule&, std::uint64_t, std::size_t,                               \
                                          std::vector<EnsembleOutput<Real>>*);

RSDDPM_INSTANTIATE(float)
RSDDPM_INSTANTIATE(double)

#undef RSDDPM_INSTANTIATE

}  // namespace rsddpm
