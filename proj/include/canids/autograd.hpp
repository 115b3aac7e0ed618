#pragma once

// Minimal reverse-mode differentiation core. A Graph is a tape of primitive
// operations built forward; backward() walks it once in reverse, accumulating
// gradients additively at fan-out. The engine is templated on the scalar so
// training runs in 32-bit floats while numeric oracles run the identical code
// in 64-bit.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "canids/common.hpp"

namespace canids::autograd {

class ShapeError : public std::runtime_error {
 public:
  ShapeError(const std::string& op, const std::string& detail)
      : std::runtime_error(op + ": " + detail) {}
};

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> v;

  Tensor() = default;
  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), v(std::move(values)) {
    if (shape_numel(shape) != static_cast<std::int64_t>(v.size()))
      throw ShapeError("tensor", "value count does not match shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s) {
    auto n = static_cast<std::size_t>(shape_numel(s));
    return Tensor(std::move(s), std::vector<T>(n, T(0)));
  }
  static Tensor full(Shape s, T value) {
    auto n = static_cast<std::size_t>(shape_numel(s));
    return Tensor(std::move(s), std::vector<T>(n, value));
  }
  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
  int dim(std::size_t i) const { return shape[i]; }
  int rank() const { return static_cast<int>(shape.size()); }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.v.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
    return out;
  }
};

// Seeded Glorot-uniform initialization: U(-limit, limit), limit = sqrt(6/(fan_in+fan_out)).
template <class T>
Tensor<T> glorot_uniform(Shape shape, int fan_in, int fan_out, Rng& rng) {
  double limit = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  for (auto& x : t.v) x = static_cast<T>(rng.uniform(-limit, limit));
  return t;
}

template <class T>
class Graph {
 public:
  using Id = int;

  Id leaf(Tensor<T> value, bool needs_grad = false) {
    return push(std::move(value), needs_grad, {});
  }

  const Tensor<T>& value(Id id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Tensor<T>& grad(Id id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.v.empty() && n.value.numel() > 0)
      throw ShapeError("grad", "no gradient recorded for node " + std::to_string(id));
    return n.grad;
  }
  bool has_grad(Id id) const { return !nodes_[static_cast<std::size_t>(id)].grad.v.empty(); }

  // --- primitives -----------------------------------------------------

  Id dense(Id x, Id w, Id b);
  Id relu(Id x);
  Id tanh_op(Id x);
  Id sigmoid(Id x);
  Id softmax(Id x);                       // over the last dimension
  Id layer_norm(Id x, Id gain, Id bias);  // normalizes the last dimension
  Id dropout(Id x, double rate, bool train, std::uint64_t seed);
  Id conv2d(Id x, Id kernels, Id bias, int stride, int pad);
  Id avg_pool(Id x, int window, int stride);
  Id lstm_layer(Id seq, Id wx, Id wh, Id b);  // [B,L,I] -> [B,L,H]

  // --- structural helpers ----------------------------------------------

  Id reshape(Id x, Shape shape);
  Id last_step(Id seq);                         // [B,L,H] -> [B,H]
  Id concat_channels(std::span<const Id> xs);   // along dim 1 of [B,C,H,W]
  Id add(Id x, Id y);
  Id scale(Id x, T factor);

  // --- losses -----------------------------------------------------------

  Id sparse_categorical_crossentropy(Id probabilities, std::vector<int> class_indices);
  Id binary_crossentropy(Id predicted, Id targets);
  Id l2_penalty(std::span<const Id> weights, T coefficient);

  void backward(Id loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on demand during backward
    bool needs_grad = false;
    std::function<void(Graph&)> back;
  };

  std::vector<Node> nodes_;

  Id push(Tensor<T> value, bool needs_grad, std::function<void(Graph&)> back) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, needs_grad, std::move(back)});
    return static_cast<Id>(nodes_.size() - 1);
  }

  bool wants(Id id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  Tensor<T>& grad_buffer(Id id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.v.empty()) n.grad = Tensor<T>::zeros(n.value.shape);
    return n.grad;
  }

  Node& node(Id id) { return nodes_[static_cast<std::size_t>(id)]; }
};

// Bias-corrected Adam. Moment tensors are shaped like their parameters; the
// step counter advances once per call.
template <class T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
  std::int64_t step = 0;
  T learning_rate = T(0.001);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T epsilon = T(1e-8);
};

template <class T>
void adam_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>* const> grads,
               AdamState<T>& state) {
  if (params.size() != grads.size())
    throw ShapeError("adam_step", "parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.push_back(Tensor<T>::zeros(p->shape));
      state.v.push_back(Tensor<T>::zeros(p->shape));
    }
  }
  if (state.m.size() != params.size())
    throw ShapeError("adam_step", "optimizer state does not match parameter count");
  state.step += 1;
  double bc1 = 1.0 - std::pow(static_cast<double>(state.beta1), static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(static_cast<double>(state.beta2), static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    const Tensor<T>& g = *grads[i];
    if (p.shape != g.shape)
      throw ShapeError("adam_step", "shape mismatch " + shape_str(p.shape) + " vs " + shape_str(g.shape));
    Tensor<T>& m = state.m[i];
    Tensor<T>& v = state.v[i];
    for (std::size_t j = 0; j < p.v.size(); ++j) {
      m.v[j] = state.beta1 * m.v[j] + (T(1) - state.beta1) * g.v[j];
      v.v[j] = state.beta2 * v.v[j] + (T(1) - state.beta2) * g.v[j] * g.v[j];
      T mhat = static_cast<T>(m.v[j] / static_cast<T>(bc1));
      T vhat = static_cast<T>(v.v[j] / static_cast<T>(bc2));
      p.v[j] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace canids::autograd
