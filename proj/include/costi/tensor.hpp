#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle to a node holding shape, values and an optional
// gradient buffer. Operations record their output node on the Tape that is
// current for the calling thread; with no active tape nothing is recorded and
// results never require gradients (inference mode).

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace costi {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Non-finite values encountered during training or sampling.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Resolves a possibly negative axis against `rank`.
inline std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty when absent
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // set only on recorded (non-leaf) nodes

  bool is_leaf() const { return !backward_fn; }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
  bool wants_grad() const { return requires_grad; }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(1), requires_grad);
  }
  /// Rank-0 tensor.
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t size(int axis) const { return shape()[normalize_axis(axis, dim())]; }

  std::span<const T> data() const { return node_->data; }
  std::vector<T> to_vector() const { return node_->data; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  /// Overwrites the values of a leaf tensor (used by optimizers and loaders).
  void assign(std::span<const T> values) {
    if (!node_->is_leaf()) throw std::logic_error("assign() on a non-leaf tensor");
    if (values.size() != numel()) throw ShapeError("assign(): size mismatch for " + to_string(shape()));
    std::copy(values.begin(), values.end(), node_->data.begin());
  }
  std::span<T> mutable_leaf_data() {
    if (!node_->is_leaf()) throw std::logic_error("mutable_leaf_data() on a non-leaf tensor");
    return node_->data;
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return node_->is_leaf(); }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; empty span when no gradient has been accumulated.
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }
  void clear_grad() { node_->grad.clear(); }

  detail::Node<T>* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

/// Ordered record of the operations executed on the current thread while the
/// tape is alive. Nodes are appended in creation order, which is a topological
/// order of the computation graph. Tapes nest LIFO.
template <typename T>
class Tape {
 public:
  Tape() : prev_(current_) { current_ = this; }
  ~Tape() { current_ = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_; }

  void record(std::shared_ptr<detail::Node<T>> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  /// Populates grad buffers of every requires_grad tensor reachable from
  /// `loss`. Leaf gradients accumulate across calls (two calls without
  /// zero_grad double them); intermediate gradients are recomputed each call.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ShapeError("backward() requires a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (!loss.requires_grad()) return;
    auto* target = loss.node();
    if (target->is_leaf()) {
      target->ensure_grad();
      target->grad[0] += T(1);
      return;
    }
    std::size_t end = nodes_.size();
    while (end > 0 && nodes_[end - 1].get() != target) --end;
    if (end == 0) throw std::logic_error("backward(): loss was not recorded on this tape");
    for (std::size_t i = 0; i < end; ++i) nodes_[i]->grad.clear();
    target->grad.assign(1, T(1));
    for (std::size_t i = end; i-- > 0;) {
      auto& node = *nodes_[i];
      if (!node.grad.empty()) node.backward_fn(node);
    }
  }

  /// Suspends gradient recording on this thread for its lifetime.
  class Pause {
   public:
    Pause() : saved_(current_) { current_ = nullptr; }
    ~Pause() { current_ = saved_; }
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;

   private:
    Tape* saved_;
  };

 private:
  Tape* prev_;
  std::vector<std::shared_ptr<detail::Node<T>>> nodes_;
  static inline thread_local Tape* current_ = nullptr;
};

/// Runs backward on the thread's current tape.
template <typename T>
void backward(const Tensor<T>& loss) {
  auto* tape = Tape<T>::current();
  if (tape == nullptr) {
    if (loss.numel() != 1) {
      throw ShapeError("backward() requires a scalar loss, got shape " + to_string(loss.shape()));
    }
    throw std::logic_error("backward(): no active tape");
  }
  tape->backward(loss);
}

namespace detail {

/// Builds an op output. When a tape is active and any input requires a
/// gradient, the node is wired to its inputs and recorded.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  auto* tape = Tape<T>::current();
  if (tape != nullptr) {
    bool any = false;
    for (const auto* in : inputs) any = any || in->requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto* in : inputs) node->parents.push_back(in->node_ptr());
      node->backward_fn = std::move(backward_fn);
      tape->record(node);
    }
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  auto* tape = Tape<T>::current();
  if (tape != nullptr) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
      node->backward_fn = std::move(backward_fn);
      tape->record(node);
    }
  }
  return Tensor<T>(std::move(node));
}

/// Parent `i` of `out` if it takes a gradient (buffer allocated), else null.
template <typename T>
Node<T>* grad_target(Node<T>& out, std::size_t i) {
  auto* p = out.parents[i].get();
  if (!p->requires_grad) return nullptr;
  p->ensure_grad();
  return p;
}

}  // namespace detail

}  // namespace costi
