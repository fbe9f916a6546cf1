#include "rsddpm/autograd.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

#include "rsddpm/digest.hpp"

#include <cblas.h>

namespace rsddpm {

// ---------------------------------------------------------------- parameters

template <class Real>
std::size_t ParameterSet<Real>::add(std::string name, Tensor<Real> init) {
  if (frozen_) throw std::logic_error("cannot add parameter '" + name + "' to a frozen set");
  for (const auto& p : params_) {
    if (p.name == name) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  }
  numel_ += init.size();
  params_.push_back({std::move(name), std::move(init)});
  return params_.size() - 1;
}

template <class Real>
std::size_t ParameterSet<Real>::find(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  throw std::out_of_range("no parameter named '" + name + "'");
}

template <class Real>
Tensor<Real>& ParameterSet<Real>::mutable_value(std::size_t i) {
  if (frozen_) throw std::logic_error("parameter '" + params_.at(i).name + "' belongs to a frozen model");
  return params_.at(i).value;
}

template <class Real>
std::vector<Real> ParameterSet<Real>::flatten() const {
  std::vector<Real> flat;
  flat.reserve(numel_);
  for (const auto& p : params_) flat.insert(flat.end(), p.value.data().begin(), p.value.data().end());
  return flat;
}

template <class Real>
void ParameterSet<Real>::assign_flat(std::span<const Real> flat) {
  if (frozen_) throw std::logic_error("cannot assign parameters of a frozen model");
  if (flat.size() != numel_) {
    throw ShapeError("assign_flat: expected " + std::to_string(numel_) + " values, got " +
                     std::to_string(flat.size()));
  }
  std::size_t offset = 0;
  for (auto& p : params_) {
    std::copy_n(flat.begin() + offset, p.value.size(), p.value.data().begin());
    offset += p.value.size();
  }
}

template <class Real>
std::pair<std::size_t, std::size_t> ParameterSet<Real>::locate(std::size_t flat_index) const {
  std::size_t offset = 0;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (flat_index < offset + params_[i].value.size()) return {i, flat_index - offset};
    offset += params_[i].value.size();
  }
  throw std::out_of_range("parameter coordinate " + std::to_string(flat_index) + " out of range");
}

template <class Real>
Real ParameterSet<Real>::coordinate(std::size_t flat_index) const {
  auto [block, offset] = locate(flat_index);
  return params_[block].value[offset];
}

template <class Real>
void ParameterSet<Real>::set_coordinate(std::size_t flat_index, Real v) {
  auto [block, offset] = locate(flat_index);
  mutable_value(block)[offset] = v;
}

template <class Real>
std::string ParameterSet<Real>::digest() const {
  Sha256 h;
  for (const auto& p : params_) {
    h.update(p.name);
    for (auto d : p.value.shape()) {
      const auto dim = static_cast<std::uint64_t>(d);
      h.update(&dim, sizeof dim);
    }
    h.update(p.value.data().data(), p.value.size() * sizeof(Real));
  }
  return Sha256::hex(h.finish());
}

template <class Real>
Gradient<Real>& Gradient<Real>::operator+=(const Gradient& other) {
  if (other.values.size() != values.size()) {
    throw ShapeError("gradient length mismatch " + std::to_string(values.size()) + " vs " +
                     std::to_string(other.values.size()));
  }
  for (std::size_t i = 0; i < values.size(); ++i) values[i] += other.values[i];
  return *this;
}

template <class Real>
Gradient<Real>& Gradient<Real>::operator*=(Real s) {
  for (auto& v : values) v *= s;
  return *this;
}

// --------------------------------------------------------------------- graph

template <class Real>
typename Graph<Real>::Var Graph<Real>::push(Tensor<Real> value, bool requires_grad,
                                            std::function<void(Graph&, const Tensor<Real>&)> backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <class Real>
bool Graph<Real>::any_grad(std::initializer_list<Var> vars) const {
  for (auto v : vars) {
    if (nodes_.at(v.id).requires_grad) return true;
  }
  return false;
}

template <class Real>
Tensor<Real>& Graph<Real>::grad_ref(Var v) {
  auto& n = nodes_[v.id];
  if (n.grad.empty()) n.grad = Tensor<Real>(n.value.shape());
  return n.grad;
}

template <class Real>
void Graph<Real>::accumulate(Var v, const Tensor<Real>& g) {
  if (!nodes_[v.id].requires_grad) return;
  auto& dst = grad_ref(v);
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

template <class Real>
const Tensor<Real>* Graph<Real>::grad(Var v) const {
  const auto& n = nodes_.at(v.id);
  return n.grad.empty() ? nullptr : &n.grad;
}

template <class Real>
typename Graph<Real>::Var Graph<Real>::constant(Tensor<Real> value) {
  return push(std::move(value), false, {});
}

template <class Real>
typename Graph<Real>::Var Graph<Real>::variable(Tensor<Real> value) {
  return push(std::move(value), true, [](Graph&, const Tensor<Real>&) {});
}

template <class Real>
typename Graph<Real>::Binding Graph<Real>::bind(const ParameterSet<Real>& params, bool track) {
  Binding b;
  b.params = &params;
  b.vars.reserve(params.count());
  for (std::size_t i = 0; i < params.count(); ++i) {
    const bool live = track && !params.frozen();
    b.vars.push_back(live ? variable(params[i].value) : constant(params[i].value));
  }
  return b;
}

template <class Real>
void Graph<Real>::backward(Var loss) {
  auto& root = nodes_.at(loss.id);
  if (root.value.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_string(root.value.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor<Real>();
  if (!root.requires_grad) return;
  grad_ref(loss)[0] = Real(1);
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    auto& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    // Closures only touch parents (smaller ids) and never grow nodes_.
    n.backward(*this, n.grad);
  }
}

template <class Real>
Gradient<Real> Graph<Real>::gradient(const Binding& binding) const {
  if (!binding.params) throw std::invalid_argument("gradient: empty binding");
  if (binding.params->frozen()) throw std::logic_error("gradient requested for a frozen model");
  if (!binding.vars.empty() && !requires_grad(binding.vars.front())) {
    throw std::logic_error("gradient requested for an untracked binding");
  }
  Gradient<Real> g;
  g.values.reserve(binding.params->numel());
  for (std::size_t i = 0; i < binding.vars.size(); ++i) {
    const auto* gi = grad(binding.vars[i]);
    const auto n = (*binding.params)[i].value.size();
    if (gi) {
      g.values.insert(g.values.end(), gi->data().begin(), gi->data().end());
    } else {
      g.values.insert(g.values.end(), n, Real(0));
    }
  }
  return g;
}

// ---------------------------------------------------------------- arithmetic

template <class Real>
typename Graph<Real>::Var Graph<Real>::add(Var a, Var b) {
  auto out = value(a) + value(b);
  return push(std::move(out), any_grad({a, b}), [a, b](Graph& g, const Tensor<Real>& go) {
    g.accumulate(a, go);
    g.accumulate(b, go);
  });
}

template <class Real>
typename Graph<Real>::Var Graph<Real>::sub(Var a, Var b) {
  auto out = value(a) - value(b);
  return push(std::move(out), any_grad({a, b}), [a, b](Graph& g, const Tensor<Real>& go) {
    g.accumulate(a, go);
    if (g.requires_grad(b)) g.accumulate(b, Real(-1) * go);
  });
}

template <class Real>
typename Graph<Real>::Var Graph<Real>::mul(Var a, Var b) {
  auto out = value(a) * value(b);
  return push(std::move(out), any_grad({a, b}), [a, b](Graph& g, const Tensor<Real>& go) {
    if (g.requires_grad(a)) g.accumulate(a, go * g.value(b));
    if (g.requires_grad(b)) g.accumulate(b, go * g.value(a));
  });
}

template <class Real>
typename Graph<Real>::Var Graph<Real>::scale(Var a, Real s) {
  auto out = s * value(a);
  return push(std::move(out), any_grad({a}), [a, s](Graph& g, const Tensor<Real>& go) { g.accumulate(a, s * go); });
}

template <class Real>
typename Graph<Real>::Var Graph<Real>::square(Var a) {
  auto out = value(a) * value(a);
  return push(std::move(out), any_grad({a}), [a](Graph& g, const Tensor<Real>& go) {
    const auto& x = g.value(a);
    auto& dst = g.grad_ref(a);
    for (std::size_t i = 0; i < x.size(); ++i) dst[i] += Real(2) * x[i] * go[i];
  });
}

template <class Real>
typename Graph<Real>::Var Graph<Real>::sum(Var a) {
  Real s = 0;
  for (auto v : value(a).data()) s += v;
  return push(Tensor<Real>({1}, s), any_grad({a}), [a](Graph& g, const Tensor<Real>& go) {
    auto& dst = g.grad_ref(a);
    for (auto& d : dst.data()) d += go[0];
  });
}

template <class Real>
typename Graph<Real>::Var Graph<Real>::mean(Var a) {
  const auto n = static_cast<Real>(value(a).size());
  Real s = 0;
  for (auto v : value(a).data()) s += v;
  return push(Tensor<Real>({1}, s / n), any_grad({a}), [a, n](Graph& g, const Tensor<Real>& go) {
    auto& dst = g.grad_ref(a);
    for (auto& d : dst.data()) d += go[0] / n;
  });
}

template <class Real>
typename Graph<Real>::Var Graph<Real>::mse(Var a, Var b) {
  const auto& x = value(a);
  const auto& y = value(b);
  require_same_shape(x.shape(), y.shape(), "mse");
  const auto n = static_cast<Real>(x.size());
  Real s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Real d = x[i] - y[i];
    s += d * d;
  }
  return push(Tensor<Real>({1}, s / n), any_grad({a, b}), [a, b, n](Graph& g, const Tensor<Real>& go) {
    const auto& x = g.value(a);
    const auto& y = g.value(b);
    const Real k = Real(2) * go[0] / n;
    if (g.requires_grad(a)) {
      auto& dst = g.grad_ref(a);
      for (std::size_t i = 0; i < x.size(); ++i) dst[i] += k * (x[i] - y[i]);
    }
    if (g.requires_grad(b)) {
      auto& dst = g.grad_ref(b);
      for (std::size_t i = 0; i < x.size(); ++i) dst[i] -= k * (x[i] - y[i]);
    }
  });
}

template <class Real>
typename Graph<Real>::Var Graph<Real>::silu(Var a) {
  const auto& x = value(a);
  Tensor<Real> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / (Real(1) + std::exp(-x[i]));
  return push(std::move(out), any_grad({a}), [a](Graph& g, const Tensor<Real>& go) {
    const auto& x = g.value(a);
    auto& dst = g.grad_ref(a);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const Real s = Real(1) / (Real(1) + std::exp(-x[i]));
      dst[i] += go[i] * s * (Real(1) + x[i] * (Real(1) - s));
    }
  });
}

template <class Real>
typename Graph<Real>::Var Graph<Real>::tanh(Var a) {
  const auto& x = value(a);
  Tensor<Real> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
  auto id = push(std::move(out), any_grad({a}), {});
  if (nodes_[id.id].requires_grad) {
    nodes_[id.id].backward = [a, id](Graph& g, const Tensor<Real>& go) {
      const auto& y = g.value(id);
      auto& dst = g.grad_ref(a);
      for (std::size_t i = 0; i < y.size(); ++i) dst[i] += go[i] * (Real(1) - y[i] * y[i]);
    };
  }
  return id;
}

// ------------------------------------------------------------------- layers

template <class Real>
typename Graph<Real>::Var Graph<Real>::linear(Var x, Var weight, Var bias) {
  const auto& xv = value(x);
  const auto& w = value(weight);
  const auto& b = value(bias);
  if (xv.rank() != 1 || w.rank() != 2 || b.rank() != 1 || w.dim(1) != xv.dim(0) || b.dim(0) != w.dim(0)) {
    throw ShapeError("linear: incompatible shapes x" + shape_string(xv.shape()) + " w" + shape_string(w.shape()) +
                     " b" + shape_string(b.shape()));
  }
  const std::size_t out_n = w.dim(0), in_n = w.dim(1);
  Tensor<Real> out({out_n});
  for (std::size_t o = 0; o < out_n; ++o) {
    Real s = b[o];
    for (std::size_t i = 0; i < in_n; ++i) s += w[o * in_n + i] * xv[i];
    out[o] = s;
  }
  return push(std::move(out), any_grad({x, weight, bias}),
              [x, weight, bias, out_n, in_n](Graph& g, const Tensor<Real>& go) {
                const auto& xv = g.value(x);
                const auto& w = g.value(weight);
                if (g.requires_grad(x)) {
                  auto& dx = g.grad_ref(x);
                  for (std::size_t o = 0; o < out_n; ++o) {
                    for (std::size_t i = 0; i < in_n; ++i) dx[i] += w[o * in_n + i] * go[o];
                  }
                }
                if (g.requires_grad(weight)) {
                  auto& dw = g.grad_ref(weight);
                  for (std::size_t o = 0; o < out_n; ++o) {
                    for (std::size_t i = 0; i < in_n; ++i) dw[o * in_n + i] += go[o] * xv[i];
                  }
                }
                g.accumulate(bias, go);
              });
}

namespace {

// Parallelism lives above the kernels (one tape per sample), so OpenBLAS runs
// single-threaded. That also keeps every GEMM bit-reproducible.
void pin_blas_threads() {
  static const bool pinned = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)pinned;
}

// Row-major GEMM C = op(A) op(B) + beta C through CBLAS.
inline void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
                 const float* b, std::size_t ldb, float beta, float* c) {
  pin_blas_threads();
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), 1.0f, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
              static_cast<int>(n));
}

inline void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                 const double* b, std::size_t ldb, double beta, double* c) {
  pin_blas_threads();
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), 1.0, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
              static_cast<int>(n));
}

// Column matrix [C*K*K, H*W] for a same-padded stride-1 convolution.
template <class Real>
void im2col(const Real* x, std::size_t c_in, std::size_t h, std::size_t w, std::size_t k, Real* col) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        Real* row = col + ((c * k + ky) * k + kx) * hw;
        const auto dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const auto dx = static_cast<std::ptrdiff_t>(kx) - pad;
        for (std::size_t y = 0; y < h; ++y) {
          const auto sy = static_cast<std::ptrdiff_t>(y) + dy;
          Real* dst = row + y * w;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(dst, dst + w, Real(0));
            continue;
          }
          const Real* src = x + (c * h + static_cast<std::size_t>(sy)) * w;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const auto sx = static_cast<std::ptrdiff_t>(xx) + dx;
            dst[xx] = (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) ? Real(0) : src[sx];
          }
        }
      }
    }
  }
}

template <class Real>
void col2im(const Real* col, std::size_t c_in, std::size_t h, std::size_t w, std::size_t k, Real* dx_out) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < c_in; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const Real* row = col + ((c * k + ky) * k + kx) * hw;
        const auto dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const auto dx = static_cast<std::ptrdiff_t>(kx) - pad;
        for (std::size_t y = 0; y < h; ++y) {
          const auto sy = static_cast<std::ptrdiff_t>(y) + dy;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
          Real* dst = dx_out + (c * h + static_cast<std::size_t>(sy)) * w;
          const Real* src = row + y * w;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const auto sx = static_cast<std::ptrdiff_t>(xx) + dx;
            if (sx >= 0 && sx < static_cast<std::ptrdiff_t>(w)) dst[sx] += src[xx];
          }
        }
      }
    }
  }
}

}  // namespace

template <class Real>
typename Graph<Real>::Var Graph<Real>::conv2d(Var x, Var weight, Var bias) {
  const auto& xv = value(x);
  const auto& wv = value(weight);
  const auto& bv = value(bias);
  if (xv.rank() != 3 || wv.rank() != 4 || bv.rank() != 1 || wv.dim(1) != xv.dim(0) || wv.dim(2) != wv.dim(3) ||
      wv.dim(2) % 2 == 0 || bv.dim(0) != wv.dim(0)) {
    throw ShapeError("conv2d: incompatible shapes x" + shape_string(xv.shape()) + " w" + shape_string(wv.shape()) +
                     " b" + shape_string(bv.shape()));
  }
  const std::size_t c_in = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  const std::size_t c_out = wv.dim(0), k = wv.dim(2);
  const std::size_t hw = h * w, kk = c_in * k * k;

  auto col = std::make_shared<std::vector<Real>>(kk * hw);
  im2col(xv.data().data(), c_in, h, w, k, col->data());

  Tensor<Real> out({c_out, h, w});
  for (std::size_t o = 0; o < c_out; ++o) std::fill_n(out.data().data() + o * hw, hw, bv[o]);
  // out[O, HW] = W[O, KK] col[KK, HW] + bias
  gemm(false, false, c_out, hw, kk, wv.data().data(), kk, col->data(), hw, Real(1), out.data().data());

  return push(std::move(out), any_grad({x, weight, bias}),
              [x, weight, bias, col, c_in, h, w, c_out, k, hw, kk](Graph& g, const Tensor<Real>& go) {
                const Real* gp = go.data().data();
                if (g.requires_grad(weight)) {
                  // dW[O, KK] += dout[O, HW] col^T[HW, KK]
                  gemm(false, true, c_out, kk, hw, gp, hw, col->data(), hw, Real(1),
                       g.grad_ref(weight).data().data());
                }
                if (g.requires_grad(bias)) {
                  auto& db = g.grad_ref(bias);
                  for (std::size_t o = 0; o < c_out; ++o) {
                    Real s = 0;
                    for (std::size_t p = 0; p < hw; ++p) s += gp[o * hw + p];
                    db[o] += s;
                  }
                }
                if (g.requires_grad(x)) {
                  std::vector<Real> dcol(kk * hw, Real(0));
                  // dcol[KK, HW] = W^T[KK, O] dout[O, HW]
                  gemm(true, false, kk, hw, c_out, g.value(weight).data().data(), kk, gp, hw, Real(0), dcol.data());
                  col2im(dcol.data(), c_in, h, w, k, g.grad_ref(x).data().data());
                }
              });
}

template <class Real>
typename Graph<Real>::Var Graph<Real>::avg_pool2(Var x) {
  const auto& xv = value(x);
  if (xv.rank() != 3 || xv.dim(1) % 2 || xv.dim(2) % 2) {
    throw ShapeError("avg_pool2: needs [C,H,W] with even H and W, got " + shape_string(xv.shape()));
  }
  const std::size_t c = xv.dim(0), h = xv.dim(1), w = xv.dim(2), oh = h / 2, ow = w / 2;
  Tensor<Real> out({c, oh, ow});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const std::size_t base = (ch * h + 2 * y) * w + 2 * xx;
        out[(ch * oh + y) * ow + xx] = Real(0.25) * (xv[base] + xv[base + 1] + xv[base + w] + xv[base + w + 1]);
      }
    }
  }
  return push(std::move(out), any_grad({x}), [x, c, h, w, oh, ow](Graph& g, const Tensor<Real>& go) {
    auto& dx = g.grad_ref(x);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const Real v = Real(0.25) * go[(ch * oh + y) * ow + xx];
          const std::size_t base = (ch * h + 2 * y) * w + 2 * xx;
          dx[base] += v;
          dx[base + 1] += v;
          dx[base + w] += v;
          dx[base + w + 1] += v;
        }
      }
    }
  });
}

template <class Real>
typename Graph<Real>::Var Graph<Real>::upsample2(Var x) {
  const auto& xv = value(x);
  if (xv.rank() != 3) throw ShapeError("upsample2: needs [C,H,W], got " + shape_string(xv.shape()));
  const std::size_t c = xv.dim(0), h = xv.dim(1), w = xv.dim(2), oh = 2 * h, ow = 2 * w;
  Tensor<Real> out({c, oh, ow});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) out[(ch * oh + y) * ow + xx] = xv[(ch * h + y / 2) * w + xx / 2];
    }
  }
  return push(std::move(out), any_grad({x}), [x, c, h, w, oh, ow](Graph& g, const Tensor<Real>& go) {
    auto& dx = g.grad_ref(x);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xx = 0; xx < ow; ++xx) dx[(ch * h + y / 2) * w + xx / 2] += go[(ch * oh + y) * ow + xx];
      }
    }
  });
}

template <class Real>
typename Graph<Real>::Var Graph<Real>::concat_channels(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2)) {
    throw ShapeError("concat_channels: spatial mismatch " + shape_string(av.shape()) + " vs " +
                     shape_string(bv.shape()));
  }
  std::vector<Real> data(av.data().begin(), av.data().end());
  data.insert(data.end(), bv.data().begin(), bv.data().end());
  const std::size_t na = av.size();
  Tensor<Real> out({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)}, std::move(data));
  return push(std::move(out), any_grad({a, b}), [a, b, na](Graph& g, const Tensor<Real>& go) {
    if (g.requires_grad(a)) {
      auto& da = g.grad_ref(a);
      for (std::size_t i = 0; i < na; ++i) da[i] += go[i];
    }
    if (g.requires_grad(b)) {
      auto& db = g.grad_ref(b);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += go[na + i];
    }
  });
}

template <class Real>
typename Graph<Real>::Var Graph<Real>::add_channel(Var x, Var v) {
  const auto& xv = value(x);
  const auto& vv = value(v);
  if (xv.rank() != 3 || vv.rank() != 1 || vv.dim(0) != xv.dim(0)) {
    throw ShapeError("add_channel: x" + shape_string(xv.shape()) + " v" + shape_string(vv.shape()));
  }
  const std::size_t c = xv.dim(0), hw = xv.dim(1) * xv.dim(2);
  Tensor<Real> out = xv;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < hw; ++p) out[ch * hw + p] += vv[ch];
  }
  return push(std::move(out), any_grad({x, v}), [x, v, c, hw](Graph& g, const Tensor<Real>& go) {
    g.accumulate(x, go);
    if (g.requires_grad(v)) {
      auto& dv = g.grad_ref(v);
      for (std::size_t ch = 0; ch < c; ++ch) {
        Real s = 0;
        for (std::size_t p = 0; p < hw; ++p) s += go[ch * hw + p];
        dv[ch] += s;
      }
    }
  });
}

template <class Real>
typename Graph<Real>::Var Graph<Real>::group_norm(Var x, std::size_t groups, Var gamma, Var beta, Real eps) {
  const auto& xv = value(x);
  const auto& gv = value(gamma);
  const auto& bv = value(beta);
  if (xv.rank() != 3 || groups == 0 || xv.dim(0) % groups || gv.shape() != Shape{xv.dim(0)} ||
      bv.shape() != Shape{xv.dim(0)}) {
    throw ShapeError("group_norm: x" + shape_string(xv.shape()) + " groups=" + std::to_string(groups));
  }
  const std::size_t c = xv.dim(0), hw = xv.dim(1) * xv.dim(2), per_group = c / groups;
  const std::size_t n = per_group * hw;

  auto xhat = std::make_shared<std::vector<Real>>(xv.size());
  auto inv_std = std::make_shared<std::vector<Real>>(groups);
  Tensor<Real> out(xv.shape());
  for (std::size_t grp = 0; grp < groups; ++grp) {
    const std::size_t begin = grp * n;
    Real mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += xv[begin + i];
    mean /= static_cast<Real>(n);
    Real var = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const Real d = xv[begin + i] - mean;
      var += d * d;
    }
    var /= static_cast<Real>(n);
    const Real is = Real(1) / std::sqrt(var + eps);
    (*inv_std)[grp] = is;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t idx = begin + i;
      const std::size_t ch = idx / hw;
      (*xhat)[idx] = (xv[idx] - mean) * is;
      out[idx] = gv[ch] * (*xhat)[idx] + bv[ch];
    }
  }

  return push(std::move(out), any_grad({x, gamma, beta}),
              [x, gamma, beta, xhat, inv_std, groups, c, hw, n](Graph& g, const Tensor<Real>& go) {
                const auto& gv = g.value(gamma);
                if (g.requires_grad(gamma) || g.requires_grad(beta)) {
                  Tensor<Real> dgamma({c}), dbeta({c});
                  for (std::size_t ch = 0; ch < c; ++ch) {
                    Real sg = 0, sb = 0;
                    for (std::size_t p = 0; p < hw; ++p) {
                      sg += go[ch * hw + p] * (*xhat)[ch * hw + p];
                      sb += go[ch * hw + p];
                    }
                    dgamma[ch] = sg;
                    dbeta[ch] = sb;
                  }
                  g.accumulate(gamma, dgamma);
                  g.accumulate(beta, dbeta);
                }
                if (g.requires_grad(x)) {
                  auto& dx = g.grad_ref(x);
                  for (std::size_t grp = 0; grp < groups; ++grp) {
                    const std::size_t begin = grp * n;
                    Real mean_d = 0, mean_dx = 0;
                    for (std::size_t i = 0; i < n; ++i) {
                      const std::size_t idx = begin + i;
                      const Real d = go[idx] * gv[idx / hw];
                      mean_d += d;
                      mean_dx += d * (*xhat)[idx];
                    }
                    mean_d /= static_cast<Real>(n);
                    mean_dx /= static_cast<Real>(n);
                    const Real is = (*inv_std)[grp];
                    for (std::size_t i = 0; i < n; ++i) {
                      const std::size_t idx = begin + i;
                      const Real d = go[idx] * gv[idx / hw];
                      dx[idx] += is * (d - mean_d - (*xhat)[idx] * mean_dx);
                    }
                  }
                }
              });
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template struct Gradient<float>;
template struct Gradient<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace rsddpm
