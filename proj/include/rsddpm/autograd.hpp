#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "rsddpm/tensor.hpp"

namespace rsddpm {

template <class Real>
struct Parameter {
  std::string name;
  Tensor<Real> value;
};

/// Ordered, named parameter blocks of one model. Flat coordinates follow the
/// insertion order of the blocks.
template <class Real>
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor<Real> init);

  std::size_t count() const noexcept { return params_.size(); }
  std::size_t numel() const noexcept { return numel_; }
  const Parameter<Real>& operator[](std::size_t i) const { return params_.at(i); }
  std::size_t find(const std::string& name) const;

  /// Mutable access; throws std::logic_error once frozen.
  Tensor<Real>& mutable_value(std::size_t i);

  bool frozen() const noexcept { return frozen_; }
  void freeze() noexcept { frozen_ = true; }

  std::vector<Real> flatten() const;
  void assign_flat(std::span<const Real> flat);
  Real coordinate(std::size_t flat_index) const;
  void set_coordinate(std::size_t flat_index, Real v);

  /// SHA-256 over names, shapes and raw parameter bytes, hex encoded.
  std::string digest() const;

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (a.params_.size() != b.params_.size()) return false;
    for (std::size_t i = 0; i < a.params_.size(); ++i) {
      if (a.params_[i].name != b.params_[i].name || !(a.params_[i].value == b.params_[i].value)) return false;
    }
    return true;
  }

 private:
  std::pair<std::size_t, std::size_t> locate(std::size_t flat_index) const;

  std::vector<Parameter<Real>> params_;
  std::size_t numel_ = 0;
  bool frozen_ = false;
};

/// Flat gradient aligned with ParameterSet::flatten().
template <class Real>
struct Gradient {
  std::vector<Real> values;

  std::size_t size() const noexcept { return values.size(); }
  Real& operator[](std::size_t i) { return values[i]; }
  Real operator[](std::size_t i) const { return values[i]; }

  Gradient& operator+=(const Gradient& other);
  Gradient& operator*=(Real s);
};

/// Reverse-mode tape. Every operation appends a node holding its value and a
/// closure that pushes the incoming gradient to its parents. backward() walks
/// the tape in reverse creation order, which is a valid topological order.
template <class Real>
class Graph {
 public:
  struct Var {
    std::size_t id = std::numeric_limits<std::size_t>::max();
  };

  struct Binding {
    const ParameterSet<Real>* params = nullptr;
    std::vector<Var> vars;
    const Var& operator[](std::size_t i) const { return vars.at(i); }
  };

  Var constant(Tensor<Real> value);
  Var variable(Tensor<Real> value);

  /// Leaves for every parameter block. Frozen sets, and any set bound with
  /// track = false, bind as constants so no gradient can reach them.
  Binding bind(const ParameterSet<Real>& params, bool track = true);

  const Tensor<Real>& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  /// nullptr when the node received no gradient.
  const Tensor<Real>* grad(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and back-propagates. loss must hold one element.
  void backward(Var loss);

  /// Collects parameter gradients after backward(). Blocks the loss does not
  /// reach get zeros. Throws for frozen bindings.
  Gradient<Real> gradient(const Binding& binding) const;

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, Real s);
  Var square(Var a);
  Var sum(Var a);
  Var mean(Var a);
  /// mean((a - b)^2) over all elements.
  Var mse(Var a, Var b);
  Var silu(Var a);
  Var tanh(Var a);

  /// x[in], weight[out, in], bias[out] -> [out]
  Var linear(Var x, Var weight, Var bias);
  /// x[C,H,W], weight[O,C,K,K], bias[O] -> [O,H,W]; stride 1, zero "same" padding, odd K.
  Var conv2d(Var x, Var weight, Var bias);
  /// 2x2 average pooling; H and W must be even.
  Var avg_pool2(Var x);
  /// Nearest-neighbour 2x upsampling.
  Var upsample2(Var x);
  Var concat_channels(Var a, Var b);
  /// x[C,H,W] + v[C] broadcast over the spatial dims (explicit, not implicit broadcasting).
  Var add_channel(Var x, Var v);
  Var group_norm(Var x, std::size_t groups, Var gamma, Var beta, Real eps = Real(1e-5));

 private:
  struct Node {
    Tensor<Real> value;
    Tensor<Real> grad;
    bool requires_grad = false;
    std::function<void(Graph&, const Tensor<Real>&)> backward;
  };

  Var push(Tensor<Real> value, bool requires_grad, std::function<void(Graph&, const Tensor<Real>&)> backward);
  bool any_grad(std::initializer_list<Var> vars) const;
  Tensor<Real>& grad_ref(Var v);
  void accumulate(Var v, const Tensor<Real>& g);

  std::vector<Node> nodes_;
};

/// backward() plus gradient() in one call.
template <class Real>
Gradient<Real> grad(Graph<Real>& graph, typename Graph<Real>::Var loss,
                    const typename Graph<Real>::Binding& binding) {
  graph.backward(loss);
  return graph.gradient(binding);
}

extern template class ParameterSet<float>;
extern template class ParameterSet<double>;
extern template struct Gradient<float>;
extern template struct Gradient<double>;
extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace rsddpm
