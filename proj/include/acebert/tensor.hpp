#pragma once

// Dense row-major tensors with reverse-mode differentiation.
//
// A BasicTensor is a shared handle: copying it aliases the same buffer.
// Values are never mutated after an op produces them; only leaves
// (parameters) are updated in place, between a backward pass and the next
// forward pass. Ops record themselves on the thread's active GradTape when
// at least one input requires a gradient; with no active tape nothing is
// recorded and inference pays no bookkeeping cost.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace acebert {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class GradTape;

namespace detail {

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty means "no gradient yet" (all zeros)
  bool requires_grad = false;
  GradTape* tape = nullptr;  // set when produced by a recorded op
};

}  // namespace detail

template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  static BasicTensor zeros(Shape shape);
  static BasicTensor full(Shape shape, T value);
  static BasicTensor from(Shape shape, std::vector<T> values);
  static BasicTensor scalar(T value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const T> data() const;
  // In-place access for leaves (initialisation, optimizer updates).
  std::span<T> mutable_data();
  T item() const;
  T at(std::size_t flat_index) const { return data()[flat_index]; }

  bool has_grad() const;
  // Empty span when no gradient has been accumulated.
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  bool requires_grad() const;
  BasicTensor& set_requires_grad(bool on);
  // True for tensors not produced by a recorded op.
  bool is_leaf() const;

  // Same values, no history, no gradient.
  BasicTensor detach() const;
  BasicTensor clone() const { return detach(); }

  template <class U>
  BasicTensor<U> cast() const {
    std::vector<U> out(numel());
    auto src = data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(src[i]);
    return BasicTensor<U>::from(shape(), std::move(out));
  }

  bool same_storage(const BasicTensor& other) const { return impl_ == other.impl_; }

  detail::TensorImpl<T>& impl() const;
  const std::shared_ptr<detail::TensorImpl<T>>& impl_ptr() const { return impl_; }

 private:
  explicit BasicTensor(std::shared_ptr<detail::TensorImpl<T>> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl<T>> impl_;

  template <class U>
  friend class BasicTensor;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

// Ordered record of differentiable ops. Nodes are appended in execution
// order, so every node's inputs precede it and a reverse sweep is a valid
// topological traversal. One tape is driven by exactly one thread.
class GradTape {
 public:
  struct Node {
    std::string op;
    std::function<void()> backward;
    std::function<void()> clear_grad;
  };

  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  // Propagates d(loss)/d(x) into every requires-grad leaf reachable from
  // `loss`. Intermediate gradients are rebuilt from scratch on each call,
  // leaf gradients accumulate.
  template <class T>
  void backward(const BasicTensor<T>& loss);

  void reset() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  void record(Node node) { nodes_.push_back(std::move(node)); }

 private:
  std::vector<Node> nodes_;
};

// Makes `tape` the recording target for ops on this thread for the scope's
// lifetime. Scopes nest.
class TapeScope {
 public:
  explicit TapeScope(GradTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape* previous_;
};

// Suspends recording (evaluation and frozen sub-computations).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradTape* previous_;
};

GradTape* active_tape();

}  // namespace acebert
