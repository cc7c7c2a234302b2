#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <string_view>
#include <vector>

#include "evasion/tensor.hpp"

namespace evasion {

struct NodeId {
  std::uint32_t index = 0;
  friend auto operator<=>(NodeId, NodeId) = default;
};

enum class Mode { train, infer };

enum class OpKind {
  leaf,
  conv2d,
  maxpool2x2,
  relu,
  dense,
  softmax,
  batch_norm,
  dropout,
  reshape,
  tanh_box,
  add,
  subtract,
  scale,
  l2_norm,
  softmax_cross_entropy,
  mean_squared_error,
  hinge_logit,
  residual,
};

std::string_view op_name(OpKind kind);

template <typename T>
class Graph;

/// Gradients of one backward pass, keyed by leaf node.
template <typename T>
class Gradients {
 public:
  bool contains(NodeId id) const { return grads_.count(id) != 0; }
  const Tensor<T>& at(NodeId id) const;
  Tensor<T> take(NodeId id);
  std::size_t size() const { return grads_.size(); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }

 private:
  friend class Graph<T>;
  std::map<NodeId, Tensor<T>> grads_;
};

/// Recorded computation over tensors. Nodes are appended in evaluation order,
/// so insertion order is a topological order. Every op stores a forward
/// function, so the whole graph can be re-evaluated after leaf values change
/// (used by finite-difference checks and by the attack loop).
///
/// Parameter leaves may borrow external tensors; those must outlive the graph
/// and must not change shape.
template <typename T>
class Graph {
 public:
  using ForwardFn = std::function<void(Graph&, NodeId self)>;
  using BackwardFn = std::function<void(Graph&, NodeId self, const Tensor<T>& grad_out)>;

  NodeId variable(Tensor<T> value, bool requires_grad = true);
  NodeId constant(Tensor<T> value) { return variable(std::move(value), false); }
  NodeId parameter(const Tensor<T>& external, bool requires_grad);

  /// Replaces the value of an owned leaf. The graph is stale until forward().
  void set_value(NodeId leaf, Tensor<T> value);

  const Tensor<T>& value(NodeId id) const;
  OpKind kind(NodeId id) const { return node(id).kind; }
  const std::vector<NodeId>& inputs(NodeId id) const { return node(id).inputs; }
  bool requires_grad(NodeId id) const { return node(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool stale() const { return stale_; }

  /// Re-evaluates every op node in insertion order.
  void forward();

  /// Reverse-mode sweep from `output`. Returns a gradient for every leaf that
  /// requires one (zeros when the leaf does not reach `output`).
  Gradients<T> backward(NodeId output, const Tensor<T>& seed);
  /// Seed 1 for single-element outputs.
  Gradients<T> backward(NodeId output);

  // Op authoring interface. `record` runs the forward function immediately.
  NodeId record(OpKind kind, std::vector<NodeId> inputs, ForwardFn forward, BackwardFn backward);
  Tensor<T>& output_slot(NodeId id);
  /// Accumulator for the gradient of `id`; zero-filled on first access.
  Tensor<T>& gradient_slot(NodeId id);

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<NodeId> inputs;
    Tensor<T> owned;
    const Tensor<T>* borrowed = nullptr;
    bool requires_grad = false;
    ForwardFn forward;
    BackwardFn backward;
  };

  const Node& node(NodeId id) const;
  Node& node(NodeId id);

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
  bool stale_ = false;
};

extern template class Gradients<float>;
extern template class Gradients<double>;
extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace evasion
