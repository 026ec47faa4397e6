#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "advlab/tensor.hpp"

namespace advlab {

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a Tape.
///
/// Cheap to copy. A Var is only meaningful while its tape is alive and has
/// not been cleared.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<Scalar>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<Scalar>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape_->requires_grad(*this); }

  /// Accumulated gradient of a leaf; nullptr until backward reached it.
  const Tensor<Scalar>* grad() const { return tape_->grad(*this); }

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run record of executed operations.
///
/// Nodes are appended in execution order. `backward` walks them in reverse,
/// visiting each node that carries a backward rule exactly once. Intermediate
/// adjoints live only for the duration of one backward call; leaf gradients
/// accumulate across calls until `zero_grad`.
template <typename Scalar>
class Tape {
 public:
  using TensorT = Tensor<Scalar>;
  /// Receives the adjoint of the node's output and adds into input adjoints.
  using BackwardFn = std::function<void(Tape&, const TensorT&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> leaf(TensorT value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), requires_grad, true, {}, {}, std::nullopt});
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  Var<Scalar> constant(TensorT value) { return leaf(std::move(value), false); }

  /// Appends the result of an op. The backward rule is kept only when at
  /// least one input participates in differentiation.
  Var<Scalar> record(TensorT value, std::vector<std::size_t> inputs, BackwardFn backward) {
    bool needs = false;
    for (std::size_t in : inputs) needs = needs || nodes_[in].requires_grad;
    if (!needs) {
      inputs.clear();
      backward = nullptr;
    }
    nodes_.push_back(Node{std::move(value), needs, false, std::move(inputs), std::move(backward), std::nullopt});
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  const TensorT& value(const Var<Scalar>& v) const { return nodes_[check(v)].value; }
  const TensorT& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(const Var<Scalar>& v) const { return nodes_[check(v)].requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  const TensorT* grad(const Var<Scalar>& v) const {
    const auto& g = nodes_[check(v)].grad;
    return g ? &*g : nullptr;
  }

  /// Adjoint buffer of node `id` during backward, zero-initialised on first use.
  TensorT& adjoint(std::size_t id) {
    auto& a = adjoints_[id];
    if (!a) a = TensorT::zeros(nodes_[id].value.shape());
    return *a;
  }

  /// Reverse sweep from a scalar loss. Returns the ids of the op nodes whose
  /// backward rule ran, in visiting order.
  std::vector<std::size_t> backward(const Var<Scalar>& loss) {
    const std::size_t root = check(loss);
    if (nodes_[root].value.size() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " + to_string(nodes_[root].value.shape()));
    }
    std::vector<std::size_t> visited;
    if (!nodes_[root].requires_grad) return visited;

    adjoints_.assign(root + 1, std::nullopt);
    adjoints_[root] = TensorT::constant(nodes_[root].value.shape(), Scalar(1));
    for (std::size_t i = root + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!adjoints_[i]) continue;
      if (node.is_leaf) {
        if (node.requires_grad) {
          if (node.grad) {
            node.grad->array() += adjoints_[i]->array();
          } else {
            node.grad = std::move(*adjoints_[i]);
          }
        }
      } else if (node.backward) {
        // Adjoint is moved out so the rule may read it while writing inputs.
        TensorT out_grad = std::move(*adjoints_[i]);
        adjoints_[i].reset();
        node.backward(*this, out_grad);
        visited.push_back(i);
        continue;
      }
      adjoints_[i].reset();
    }
    adjoints_.clear();
    for (std::size_t i = 0; i <= root; ++i) {
      Node& node = nodes_[i];
      if (node.is_leaf && node.requires_grad && !node.grad) node.grad = TensorT::zeros(node.value.shape());
    }
    return visited;
  }

  void zero_grad() {
    for (auto& n : nodes_) n.grad.reset();
  }

  void clear() {
    nodes_.clear();
    adjoints_.clear();
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    TensorT value;
    bool requires_grad;
    bool is_leaf;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    std::optional<TensorT> grad;
  };

  std::size_t check(const Var<Scalar>& v) const {
    if (!v.valid() || &v.tape() != this || v.id() >= nodes_.size()) {
      throw std::invalid_argument("tape: variable does not belong to this tape");
    }
    return v.id();
  }

  std::vector<Node> nodes_;
  std::vector<std::optional<TensorT>> adjoints_;
};

}  // namespace advlab
