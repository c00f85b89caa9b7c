#pragma once

#include "xma/common.hpp"

#include <functional>
#include <memory>
#include <utility>
#include <vector>

namespace xma {

template <typename S>
class Tape;

// One value in a computation graph. Gradients are accumulated in place; the
// accumulation order is fixed by the tape (reverse creation order), which
// keeps runs reproducible.
template <typename S>
struct Node {
  Mat<S> value;
  Mat<S> grad;
  bool has_grad = false;
  bool requires_grad = false;
  int rank = 2;
  Tape<S>* tape = nullptr;
  size_t tape_index = 0;
  std::function<void(Node&)> backward_fn;

  template <typename D>
  void accumulate(const D& g) {
    if (!has_grad) {
      grad = g;
      has_grad = true;
    } else {
      grad += g;
    }
  }

  // Zero-filled gradient buffer for scatter-style backward passes.
  Mat<S>& ensure_grad() {
    if (!has_grad) {
      grad = Mat<S>::Zero(value.rows(), value.cols());
      has_grad = true;
    }
    return grad;
  }
};

template <typename S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<S>> n) : node_(std::move(n)) {}

  static Tensor from_matrix(Mat<S> m, bool requires_grad = false, int rank = 2) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(m);
    n->requires_grad = requires_grad;
    n->rank = rank;
    return Tensor(std::move(n));
  }

  static Tensor row(const std::vector<S>& v, bool requires_grad = false) {
    Mat<S> m(1, static_cast<Index>(v.size()));
    for (Index i = 0; i < m.cols(); ++i) m(0, i) = v[static_cast<size_t>(i)];
    return from_matrix(std::move(m), requires_grad, 1);
  }

  static Tensor scalar(S v) {
    Mat<S> m(1, 1);
    m(0, 0) = v;
    return from_matrix(std::move(m), false, 0);
  }

  static Tensor zeros(Index rows, Index cols, bool requires_grad = false) {
    return from_matrix(Mat<S>::Zero(rows, cols), requires_grad, 2);
  }

  bool defined() const { return node_ != nullptr; }
  const Mat<S>& value() const { return node_->value; }
  // Direct value mutation; reserved for parameter updates between steps.
  Mat<S>& raw() { return node_->value; }

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  int rank() const { return node_->rank; }

  std::vector<Index> shape() const {
    switch (node_->rank) {
      case 0: return {};
      case 1: return {cols()};
      default: return {rows(), cols()};
    }
  }

  S item() const {
    if (size() != 1) throw ShapeError(cat("item(): tensor has ", size(), " elements"));
    return node_->value(0, 0);
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->has_grad; }

  const Mat<S>& grad() const {
    if (!node_->has_grad) throw ValueError("gradient not present; run backward first");
    return node_->grad;
  }

  // Stop-gradient tensors and unreached leaves read as exactly zero.
  Mat<S> grad_or_zero() const {
    if (node_->has_grad) return node_->grad;
    return Mat<S>::Zero(rows(), cols());
  }

  void clear_grad() {
    node_->has_grad = false;
    node_->grad.resize(0, 0);
  }

  const std::shared_ptr<Node<S>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<S>> node_;
};

// Records executed operations in creation order. The reverse pass walks the
// record backwards, which is a valid reverse topological order because every
// operand exists before its consumer.
template <typename S>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() {
    if (current_ == this) current_ = nullptr;
  }

  static Tape* current() { return current_; }

  void record(const std::shared_ptr<Node<S>>& n) {
    n->tape = this;
    n->tape_index = nodes_.size();
    nodes_.push_back(n);
  }

  size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // seed scales the whole gradient (loss is treated as seed * loss).
  void backward(const Tensor<S>& loss, S seed = S(1)) {
    if (!loss.defined() || loss.size() != 1)
      throw ShapeError("backward requires a scalar loss");
    if (consumed_) throw ValueError("tape already consumed by a previous backward pass");
    const auto& ln = loss.node();
    if (ln->tape != this)
      throw ValueError("loss tensor was not recorded on this tape");
    ln->accumulate(Mat<S>::Constant(1, 1, seed));
    for (size_t i = ln->tape_index + 1; i-- > 0;) {
      Node<S>& n = *nodes_[i];
      if (n.has_grad && n.backward_fn) n.backward_fn(n);
    }
    consumed_ = true;
    nodes_.clear();
  }

  // Scoped activation; ops record onto the innermost active tape.
  struct Scope {
    explicit Scope(Tape& t) {
      if (current_) throw ValueError("a tape is already active on this thread");
      current_ = &t;
    }
    ~Scope() { current_ = nullptr; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;
  };

 private:
  std::vector<std::shared_ptr<Node<S>>> nodes_;
  bool consumed_ = false;
  static thread_local Tape* current_;
};

template <typename S>
thread_local Tape<S>* Tape<S>::current_ = nullptr;

// Detaches a value from gradient flow: the result never contributes to any
// upstream gradient.
template <typename S>
Tensor<S> stop_grad(const Tensor<S>& x) {
  return Tensor<S>::from_matrix(x.value(), false, x.rank());
}

namespace detail {

template <typename S>
bool any_requires_grad(std::initializer_list<const Tensor<S>*> ts) {
  for (const Tensor<S>* t : ts)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

// Shared op constructor: computes nothing itself, just wires the node into
// the active tape when a gradient will be needed.
template <typename S, typename Backward>
Tensor<S> make_op(Mat<S> value, int rank, bool needs_grad, Backward&& bw) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  n->rank = rank;
  Tape<S>* tape = Tape<S>::current();
  if (tape != nullptr && needs_grad) {
    n->requires_grad = true;
    n->backward_fn = std::forward<Backward>(bw);
    tape->record(n);
  }
  return Tensor<S>(std::move(n));
}

}  // namespace detail

}  // namespace xma
