#include "rsddpm/models.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "rsddpm/diffusion.hpp"
#include "rsddpm/parallel.hpp"

namespace rsddpm {

template <class Real>
Tensor<Real> timestep_embedding(int t, std::size_t dim) {
  if (dim < 2 || dim % 2) throw std::invalid_argument("timestep_embedding: dim must be even and >= 2");
  const std::size_t half = dim / 2;
  Tensor<Real> emb({dim});
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    const double arg = static_cast<double>(t) * freq;
    emb[i] = static_cast<Real>(std::sin(arg));
    emb[half + i] = static_cast<Real>(std::cos(arg));
  }
  return emb;
}

namespace detail {

template <class Real>
void LayerTable<Real>::conv(ParameterSet<Real>& ps, Rng& rng, const std::string& name, std::size_t c_in,
                            std::size_t c_out, double gain) {
  const double std_dev = gain * std::sqrt(2.0 / static_cast<double>(c_in * 9));
  Tensor<Real> w({c_out, c_in, 3, 3});
  for (auto& v : w.data()) v = static_cast<Real>(std_dev * rng.normal());
  index_[name + ".w"] = ps.add(name + ".w", std::move(w));
  index_[name + ".b"] = ps.add(name + ".b", Tensor<Real>({c_out}));
}

template <class Real>
void LayerTable<Real>::norm(ParameterSet<Real>& ps, const std::string& name, std::size_t channels) {
  index_[name + ".gamma"] = ps.add(name + ".gamma", Tensor<Real>({channels}, Real(1)));
  index_[name + ".beta"] = ps.add(name + ".beta", Tensor<Real>({channels}));
}

template <class Real>
void LayerTable<Real>::dense(ParameterSet<Real>& ps, Rng& rng, const std::string& name, std::size_t in,
                             std::size_t out, double gain) {
  const double std_dev = gain * std::sqrt(1.0 / static_cast<double>(in));
  Tensor<Real> w({out, in});
  for (auto& v : w.data()) v = static_cast<Real>(std_dev * rng.normal());
  index_[name + ".w"] = ps.add(name + ".w", std::move(w));
  index_[name + ".b"] = ps.add(name + ".b", Tensor<Real>({out}));
}

}  // namespace detail

namespace {

void check_groups(std::size_t channels, std::size_t groups) {
  if (groups == 0 || channels % groups) {
    throw std::invalid_argument("channel count " + std::to_string(channels) + " is not divisible into " +
                                std::to_string(groups) + " groups");
  }
}

template <class Real>
void check_image(const Tensor<Real>& x, std::size_t channels, const char* what) {
  if (x.rank() != 3 || x.dim(0) != channels) {
    throw ShapeError(std::string(what) + ": expected [" + std::to_string(channels) + ",H,W], got " +
                     shape_string(x.shape()));
  }
  if (x.dim(1) % 4 || x.dim(2) % 4) {
    throw ShapeError(std::string(what) + ": spatial dims must be divisible by 4, got " + shape_string(x.shape()));
  }
}

}  // namespace

// ------------------------------------------------------------------ denoiser

template <class Real>
Denoiser<Real>::Denoiser(DenoiserConfig config, std::uint64_t seed) : config_(config) {
  const std::size_t c = config_.base_channels, c2 = 2 * c, e = config_.time_embed_dim;
  check_groups(c, config_.groups);
  if (config_.T < 1) throw std::invalid_argument("denoiser: T must be positive");
  Rng rng(seed);
  auto& L = layers_;
  L.dense(params_, rng, "time.fc1", e, e);
  L.dense(params_, rng, "time.fc2", e, e);
  L.conv(params_, rng, "conv_in", config_.state_channels + config_.cond_channels, c);
  auto res = [&](const std::string& name, std::size_t ch) {
    L.norm(params_, name + ".norm1", ch);
    L.conv(params_, rng, name + ".conv1", ch, ch);
    L.dense(params_, rng, name + ".temb", e, ch);
    L.norm(params_, name + ".norm2", ch);
    L.conv(params_, rng, name + ".conv2", ch, ch, 0.5);
  };
  res("res1", c);
  L.conv(params_, rng, "down1", c, c2);
  res("res2", c2);
  L.conv(params_, rng, "down2", c2, c2);
  res("mid", c2);
  L.conv(params_, rng, "up2", 2 * c2, c2);
  L.conv(params_, rng, "up1", c2 + c, c);
  res("res_out", c);
  L.norm(params_, "norm_out", c);
  L.conv(params_, rng, "conv_out", c, config_.state_channels, 0.1);
}

template <class Real>
typename Denoiser<Real>::Var Denoiser<Real>::res_block(Graph<Real>& g, const Binding& b, const std::string& name,
                                                       Var x, Var temb) const {
  const auto& L = layers_;
  auto h = g.group_norm(x, config_.groups, b[L(name + ".norm1.gamma")], b[L(name + ".norm1.beta")]);
  h = g.conv2d(g.silu(h), b[L(name + ".conv1.w")], b[L(name + ".conv1.b")]);
  h = g.add_channel(h, g.linear(temb, b[L(name + ".temb.w")], b[L(name + ".temb.b")]));
  h = g.group_norm(h, config_.groups, b[L(name + ".norm2.gamma")], b[L(name + ".norm2.beta")]);
  h = g.conv2d(g.silu(h), b[L(name + ".conv2.w")], b[L(name + ".conv2.b")]);
  return g.add(x, h);
}

template <class Real>
typename Denoiser<Real>::Var Denoiser<Real>::forward(Graph<Real>& g, const Binding& b, Var x_t, Var cond,
                                                     int t) const {
  check_image(g.value(x_t), config_.state_channels, "denoiser x_t");
  check_image(g.value(cond), config_.cond_channels, "denoiser condition");
  const auto& xs = g.value(x_t).shape();
  const auto& cs = g.value(cond).shape();
  if (xs[1] != cs[1] || xs[2] != cs[2]) {
    throw ShapeError("denoiser: spatial mismatch " + shape_string(xs) + " vs " + shape_string(cs));
  }
  if (t < 1 || t > config_.T) {
    throw std::out_of_range("denoiser: timestep " + std::to_string(t) + " outside [1, " + std::to_string(config_.T) +
                            "]");
  }
  const auto& L = layers_;
  auto temb = g.constant(timestep_embedding<Real>(t, config_.time_embed_dim));
  temb = g.silu(g.linear(temb, b[L("time.fc1.w")], b[L("time.fc1.b")]));
  temb = g.silu(g.linear(temb, b[L("time.fc2.w")], b[L("time.fc2.b")]));

  auto h0 = g.conv2d(g.concat_channels(x_t, cond), b[L("conv_in.w")], b[L("conv_in.b")]);
  auto h1 = res_block(g, b, "res1", h0, temb);
  auto d1 = g.conv2d(g.avg_pool2(h1), b[L("down1.w")], b[L("down1.b")]);
  auto h2 = res_block(g, b, "res2", d1, temb);
  auto d2 = g.conv2d(g.avg_pool2(h2), b[L("down2.w")], b[L("down2.b")]);
  auto m = res_block(g, b, "mid", d2, temb);
  auto u2 = g.conv2d(g.concat_channels(g.upsample2(m), h2), b[L("up2.w")], b[L("up2.b")]);
  auto u1 = g.conv2d(g.concat_channels(g.upsample2(u2), h1), b[L("up1.w")], b[L("up1.b")]);
  auto r = res_block(g, b, "res_out", u1, temb);
  auto o = g.group_norm(r, config_.groups, b[L("norm_out.gamma")], b[L("norm_out.beta")]);
  return g.conv2d(g.silu(o), b[L("conv_out.w")], b[L("conv_out.b")]);
}

template <class Real>
Tensor<Real> Denoiser<Real>::predict(const Tensor<Real>& x_t, const Tensor<Real>& cond, int t) const {
  Graph<Real> g;
  auto b = g.bind(params_, false);
  auto out = forward(g, b, g.constant(x_t), g.constant(cond), t);
  return g.value(out);
}

// ----------------------------------------------------------------------- e2e

template <class Real>
E2EModel<Real>::E2EModel(E2EConfig config, std::uint64_t seed) : config_(config) {
  const std::size_t c = config_.base_channels, c2 = 2 * c;
  check_groups(c, config_.groups);
  Rng rng(seed);
  auto& L = layers_;
  auto res = [&](const std::string& name, std::size_t ch) {
    L.norm(params_, name + ".norm1", ch);
    L.conv(params_, rng, name + ".conv1", ch, ch);
    L.norm(params_, name + ".norm2", ch);
    L.conv(params_, rng, name + ".conv2", ch, ch, 0.5);
  };
  L.conv(params_, rng, "conv_in", config_.in_channels, c);
  res("res1", c);
  L.conv(params_, rng, "down1", c, c2);
  res("res2", c2);
  L.conv(params_, rng, "up1", c2 + c, c);
  L.norm(params_, "norm_out", c);
  L.conv(params_, rng, "conv_out", c, config_.out_channels, 0.5);
}

template <class Real>
typename E2EModel<Real>::Var E2EModel<Real>::res_block(Graph<Real>& g, const Binding& b, const std::string& name,
                                                       Var x) const {
  const auto& L = layers_;
  auto h = g.group_norm(x, config_.groups, b[L(name + ".norm1.gamma")], b[L(name + ".norm1.beta")]);
  h = g.conv2d(g.silu(h), b[L(name + ".conv1.w")], b[L(name + ".conv1.b")]);
  h = g.group_norm(h, config_.groups, b[L(name + ".norm2.gamma")], b[L(name + ".norm2.beta")]);
  h = g.conv2d(g.silu(h), b[L(name + ".conv2.w")], b[L(name + ".conv2.b")]);
  return g.add(x, h);
}

template <class Real>
typename E2EModel<Real>::Var E2EModel<Real>::forward(Graph<Real>& g, const Binding& b, Var image) const {
  check_image(g.value(image), config_.in_channels, "e2e input");
  const auto& L = layers_;
  auto h0 = g.conv2d(image, b[L("conv_in.w")], b[L("conv_in.b")]);
  auto h1 = res_block(g, b, "res1", h0);
  auto d1 = g.conv2d(g.avg_pool2(h1), b[L("down1.w")], b[L("down1.b")]);
  auto h2 = res_block(g, b, "res2", d1);
  auto u1 = g.conv2d(g.concat_channels(g.upsample2(h2), h1), b[L("up1.w")], b[L("up1.b")]);
  auto o = g.group_norm(u1, config_.groups, b[L("norm_out.gamma")], b[L("norm_out.beta")]);
  return g.tanh(g.conv2d(g.silu(o), b[L("conv_out.w")], b[L("conv_out.b")]));
}

template <class Real>
Tensor<Real> E2EModel<Real>::predict(const Tensor<Real>& image) const {
  Graph<Real> g;
  auto b = g.bind(params_, false);
  return g.value(forward(g, b, g.constant(image)));
}

// ------------------------------------------------------------------ training

template <class Real>
E2ETrainResult train_e2e(E2EModel<Real>& model, const std::vector<SupervisedPair<Real>>& train_set,
                         const std::vector<SupervisedPair<Real>>& eval_set, const TrainConfig& config, Rng& rng,
                         const TrainLogger& log) {
  if (train_set.empty()) throw std::invalid_argument("train_e2e: empty dataset");
  if (model.frozen()) throw std::logic_error("train_e2e: model is frozen");
  if (config.batch == 0 || config.steps < 0) throw std::invalid_argument("train_e2e: invalid batch/steps");
  const auto& evals = eval_set.empty() ? train_set : eval_set;

  auto evaluate = [&] {
    std::vector<double> losses(evals.size());
    parallel_for(evals.size(), config.threads, [&](std::size_t i) {
      losses[i] = static_cast<double>(training_loss(model.predict(evals[i].input), evals[i].target));
    });
    return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
  };

  const auto start = std::chrono::steady_clock::now();
  AdamState<Real> state;
  E2ETrainResult result;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  double best = std::numeric_limits<double>::infinity();
  std::vector<Real> best_params;
  int stale = 0;

  for (int step = 1; step <= config.steps; ++step) {
    std::vector<std::size_t> batch(config.batch);
    for (auto& idx : batch) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) {
          std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)))]);
        }
        cursor = 0;
      }
      idx = order[cursor++];
    }

    std::vector<Gradient<Real>> grads(batch.size());
    std::vector<double> losses(batch.size());
    parallel_for(batch.size(), config.threads, [&](std::size_t i) {
      const auto& item = train_set[batch[i]];
      Graph<Real> g;
      auto b = g.bind(model.parameters());
      auto out = model.forward(g, b, g.constant(item.input));
      auto loss = g.mse(out, g.constant(item.target));
      losses[i] = static_cast<double>(g.value(loss)[0]);
      grads[i] = grad(g, loss, b);
    });
    Gradient<Real> total = grads[0];
    for (std::size_t i = 1; i < grads.size(); ++i) total += grads[i];
    total *= Real(1) / static_cast<Real>(grads.size());
    adam_step(model.parameters(), total, state, config.adam);

    TrainRecord rec;
    rec.step = step;
    rec.loss = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
    if (config.eval_every > 0 && (step % config.eval_every == 0 || step == config.steps)) {
      rec.eval_loss = evaluate();
      result.eval_losses.push_back(rec.eval_loss);
      if (rec.eval_loss < best) {
        best = rec.eval_loss;
        best_params = model.parameters().flatten();
        stale = 0;
      } else {
        ++stale;
      }
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (log) log(rec);
    result.steps_run = step;
    if (config.patience > 0 && stale >= config.patience) break;
  }
  if (!best_params.empty()) model.parameters().assign_flat(best_params);
  return result;
}

template Tensor<float> timestep_embedding<float>(int, std::size_t);
template Tensor<double> timestep_embedding<double>(int, std::size_t);
template class detail::LayerTable<float>;
template class detail::LayerTable<double>;
template class Denoiser<float>;
template class Denoiser<double>;
template class E2EModel<float>;
template class E2EModel<double>;
template E2ETrainResult train_e2e(E2EModel<float>&, const std::vector<SupervisedPair<float>>&,
                                  const std::vector<SupervisedPair<float>>&, const TrainConfig&, Rng&,
                                  const TrainLogger&);
template E2ETrainResult train_e2e(E2EModel<double>&, const std::vector<SupervisedPair<double>>&,
                                  const std::vector<SupervisedPair<double>>&, const TrainConfig&, Rng&,
                                  const TrainLogger&);

}  // namespace rsddpm
