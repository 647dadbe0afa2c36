#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rescaps/tensor.hpp"

namespace rescaps {

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<Scalar>& tape() const {
    if (tape_ == nullptr) throw UsageError("Var is not attached to a tape");
    return *tape_;
  }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<Scalar>& value() const { return tape().value(id_); }
  const Shape& shape() const { return value().shape(); }
  int rank() const { return value().rank(); }
  Index dim(int axis) const { return value().dim(axis); }
  bool requires_grad() const { return tape().requires_grad(id_); }

  /// Gradient of the last backward() target w.r.t. this value. Only leaves retain
  /// gradients; interior nodes and untouched leaves report zeros.
  Tensor<Scalar> grad() const { return tape().grad(id_); }

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode autodiff record. Nodes are appended in execution order, so the
/// node list is always topologically sorted.
template <typename Scalar>
class Tape {
 public:
  /// Receives the tape and the id of the node whose gradient is being propagated.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Values that participate in the forward pass but are never differentiated.
  Var<Scalar> constant(Tensor<Scalar> value) {
    return push("constant", std::move(value), false, {}, {});
  }

  /// Trainable leaf; its gradient is available after backward().
  Var<Scalar> leaf(Tensor<Scalar> value) { return push("leaf", std::move(value), true, {}, {}); }

  /// Records the output of a primitive. The node requires a gradient iff any input does.
  Var<Scalar> record(const char* op, Tensor<Scalar> value, std::vector<std::size_t> inputs,
                     BackwardFn fn) {
    if (check_finite_ && !value.all_finite())
      throw NumericalError("non-finite value produced by " + std::string(op) + " (shape " +
                           to_string(value.shape()) + ")");
    bool needs = false;
    for (std::size_t in : inputs) needs = needs || nodes_.at(in).requires_grad;
    if (!needs) return push(op, std::move(value), false, {}, {});
    return push(op, std::move(value), true, std::move(inputs), std::move(fn));
  }

  void backward(const Var<Scalar>& loss) {
    if (!loss.valid() || &loss.tape() != this || loss.id() >= nodes_.size())
      throw UsageError("backward(): loss was not recorded on this tape");
    const Tensor<Scalar>& lv = nodes_[loss.id()].value;
    if (lv.size() != 1)
      throw UsageError("backward(): loss must be a scalar, got shape " + to_string(lv.shape()));
    for (auto& n : nodes_) n.grad = Tensor<Scalar>();
    if (!nodes_[loss.id()].requires_grad) return;
    grad_buffer(loss.id())->array().setConstant(Scalar(1));
    for (std::size_t k = loss.id() + 1; k-- > 0;) {
      Node& n = nodes_[k];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, k);
      // Interior gradients are consumed; only leaves keep theirs.
      n.grad = Tensor<Scalar>();
    }
  }

  const Tensor<Scalar>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  Tensor<Scalar> grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (n.grad.size() == 0 && numel(n.value.shape()) != 0) return Tensor<Scalar>(n.value.shape());
    return n.grad;
  }

  /// Upstream gradient of node `id` during backward().
  const Tensor<Scalar>& upstream(std::size_t id) const { return nodes_[id].grad; }

  /// Zero-initialized accumulator for node `id`, or nullptr if it needs no gradient.
  Tensor<Scalar>* grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.size() != numel(n.value.shape()) || n.grad.shape() != n.value.shape())
      n.grad = Tensor<Scalar>(n.value.shape());
    return &n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Name of the primitive that produced node `id` ("constant" and "leaf" for inputs).
  const char* op(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t count_ops(std::string_view name) const {
    std::size_t n = 0;
    for (const auto& node : nodes_) n += name == node.op;
    return n;
  }

  void set_check_finite(bool on) { check_finite_ = on; }

 private:
  struct Node {
    const char* op;
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  Var<Scalar> push(const char* op, Tensor<Scalar> value, bool requires_grad,
                   std::vector<std::size_t> inputs, BackwardFn fn) {
    nodes_.push_back(Node{op, std::move(value), Tensor<Scalar>(), requires_grad, std::move(inputs),
                          std::move(fn)});
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  bool check_finite_ = true;
};

// ---------------------------------------------------------------------------
// Differentiable primitives. Binary elementwise ops broadcast numpy-style
// (shapes aligned on the right; extents must match or be 1).

template <typename S> Var<S> add(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> sub(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> mul(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> div(const Var<S>& a, const Var<S>& b);
/// Elementwise minimum; ties send the gradient to `a`.
template <typename S> Var<S> minimum(const Var<S>& a, const Var<S>& b);

template <typename S> Var<S> add_scalar(const Var<S>& a, S c);
template <typename S> Var<S> mul_scalar(const Var<S>& a, S c);
template <typename S> Var<S> neg(const Var<S>& a);

template <typename S> Var<S> relu(const Var<S>& a);
template <typename S> Var<S> sigmoid(const Var<S>& a);
/// log(sigmoid(x)), stable for large |x|.
template <typename S> Var<S> log_sigmoid(const Var<S>& a);
template <typename S> Var<S> exp(const Var<S>& a);
template <typename S> Var<S> log(const Var<S>& a);
template <typename S> Var<S> sqrt(const Var<S>& a);
template <typename S> Var<S> square(const Var<S>& a);

template <typename S> Var<S> sum(const Var<S>& a, int axis, bool keepdim = true);
template <typename S> Var<S> mean(const Var<S>& a, int axis, bool keepdim = true);
template <typename S> Var<S> sum_all(const Var<S>& a);
template <typename S> Var<S> mean_all(const Var<S>& a);

template <typename S> Var<S> reshape(const Var<S>& a, Shape shape);
template <typename S> Var<S> broadcast_to(const Var<S>& a, Shape shape);
/// Contiguous window [start, start+length) along `axis`.
template <typename S> Var<S> slice(const Var<S>& a, int axis, Index start, Index length);

/// Numerically stable softmax along `axis`.
template <typename S> Var<S> softmax(const Var<S>& a, int axis);

inline constexpr double kNormEpsilon = 1e-7;

/// sqrt(sum(x^2, axis) + eps), keepdim.
template <typename S> Var<S> norm(const Var<S>& a, int axis, S eps = S(kNormEpsilon));

/// Capsule nonlinearity along `axis`: s * sqrt(|s|^2+eps) / (1+|s|^2).
template <typename S> Var<S> squash(const Var<S>& a, int axis, S eps = S(kNormEpsilon));

/// 2-D matrix product (m x k)(k x n).
template <typename S> Var<S> matmul(const Var<S>& a, const Var<S>& b);

/// Valid-padding cross-correlation. input B x H x W x Cin, kernel k x k x Cin x Cout,
/// bias Cout. Output B x H' x W' x Cout with H' = (H-k)/stride + 1.
template <typename S>
Var<S> conv2d(const Var<S>& input, const Var<S>& kernel, const Var<S>& bias, Index stride);

/// Capsule predictions: poses B x I x Din, weights I x J x Dout x Din -> B x I x J x Dout,
/// out[b,i,j] = W[i,j] * u[b,i].
template <typename S> Var<S> capsule_votes(const Var<S>& poses, const Var<S>& weights);

// Operator sugar.
template <typename S> Var<S> operator+(const Var<S>& a, const Var<S>& b) { return add(a, b); }
template <typename S> Var<S> operator-(const Var<S>& a, const Var<S>& b) { return sub(a, b); }
template <typename S> Var<S> operator*(const Var<S>& a, const Var<S>& b) { return mul(a, b); }
template <typename S> Var<S> operator/(const Var<S>& a, const Var<S>& b) { return div(a, b); }
template <typename S> Var<S> operator-(const Var<S>& a) { return neg(a); }
template <typename S> Var<S> operator+(const Var<S>& a, S c) { return add_scalar(a, c); }
template <typename S> Var<S> operator*(const Var<S>& a, S c) { return mul_scalar(a, c); }
template <typename S> Var<S> operator*(S c, const Var<S>& a) { return mul_scalar(a, c); }

/// Shape produced by broadcasting `a` against `b`; throws DimensionError if incompatible.
Shape broadcast_shape(const Shape& a, const Shape& b);

}  // namespace rescaps
