#include "evasion/graph.hpp"

#include <stdexcept>
#include <string>

#include "evasion/errors.hpp"

namespace evasion {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::conv2d: return "conv2d";
    case OpKind::maxpool2x2: return "maxpool2x2";
    case OpKind::relu: return "relu";
    case OpKind::dense: return "dense";
    case OpKind::softmax: return "softmax";
    case OpKind::batch_norm: return "batch_norm";
    case OpKind::dropout: return "dropout";
    case OpKind::reshape: return "reshape";
    case OpKind::tanh_box: return "tanh_box";
    case OpKind::add: return "add";
    case OpKind::subtract: return "subtract";
    case OpKind::scale: return "scale";
    case OpKind::l2_norm: return "l2_norm";
    case OpKind::softmax_cross_entropy: return "softmax_cross_entropy";
    case OpKind::mean_squared_error: return "mean_squared_error";
    case OpKind::hinge_logit: return "hinge_logit";
    case OpKind::residual: return "residual";
  }
  return "unknown";
}

template <typename T>
const Tensor<T>& Gradients<T>::at(NodeId id) const {
  auto it = grads_.find(id);
  if (it == grads_.end()) throw std::out_of_range("no gradient recorded for node " + std::to_string(id.index));
  return it->second;
}

template <typename T>
Tensor<T> Gradients<T>::take(NodeId id) {
  auto it = grads_.find(id);
  if (it == grads_.end()) throw std::out_of_range("no gradient recorded for node " + std::to_string(id.index));
  Tensor<T> out = std::move(it->second);
  grads_.erase(it);
  return out;
}

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(NodeId id) const {
  if (id.index >= nodes_.size()) throw std::out_of_range("unknown graph node " + std::to_string(id.index));
  return nodes_[id.index];
}

template <typename T>
typename Graph<T>::Node& Graph<T>::node(NodeId id) {
  if (id.index >= nodes_.size()) throw std::out_of_range("unknown graph node " + std::to_string(id.index));
  return nodes_[id.index];
}

template <typename T>
NodeId Graph<T>::variable(Tensor<T> value, bool requires_grad) {
  if (value.empty()) throw ShapeError("graph leaf needs a non-empty tensor");
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
NodeId Graph<T>::parameter(const Tensor<T>& external, bool requires_grad) {
  if (external.empty()) throw ShapeError("graph parameter needs a non-empty tensor");
  Node n;
  n.borrowed = &external;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
void Graph<T>::set_value(NodeId leaf, Tensor<T> value) {
  Node& n = node(leaf);
  if (n.kind != OpKind::leaf || n.borrowed != nullptr) {
    throw std::logic_error("set_value needs an owned leaf node");
  }
  if (value.shape() != n.owned.shape()) {
    throw ShapeError("set_value shape " + to_string(value.shape()) + " differs from leaf shape " +
                     to_string(n.owned.shape()));
  }
  n.owned = std::move(value);
  stale_ = true;
}

template <typename T>
const Tensor<T>& Graph<T>::value(NodeId id) const {
  const Node& n = node(id);
  return n.borrowed ? *n.borrowed : n.owned;
}

template <typename T>
Tensor<T>& Graph<T>::output_slot(NodeId id) {
  Node& n = node(id);
  if (n.borrowed) throw std::logic_error("borrowed leaves are read-only");
  return n.owned;
}

template <typename T>
NodeId Graph<T>::record(OpKind kind, std::vector<NodeId> inputs, ForwardFn forward, BackwardFn backward) {
  Node n;
  n.kind = kind;
  for (auto in : inputs) n.requires_grad = n.requires_grad || node(in).requires_grad;
  n.inputs = std::move(inputs);
  n.forward = std::move(forward);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  NodeId id{static_cast<std::uint32_t>(nodes_.size() - 1)};
  nodes_.back().forward(*this, id);
  return id;
}

template <typename T>
void Graph<T>::forward() {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].kind != OpKind::leaf) nodes_[i].forward(*this, NodeId{static_cast<std::uint32_t>(i)});
  }
  stale_ = false;
}

template <typename T>
Tensor<T>& Graph<T>::gradient_slot(NodeId id) {
  if (id.index >= grads_.size()) throw std::logic_error("gradient_slot used outside backward");
  Tensor<T>& g = grads_[id.index];
  if (g.empty()) g = Tensor<T>(value(id).shape(), T(0));
  return g;
}

template <typename T>
Gradients<T> Graph<T>::backward(NodeId output, const Tensor<T>& seed) {
  if (nodes_.empty()) throw std::logic_error("backward on an empty graph");
  if (stale_) throw std::logic_error("backward requested before forward on updated leaves");
  const Node& out = node(output);
  const Tensor<T>& out_value = out.borrowed ? *out.borrowed : out.owned;
  if (seed.shape() != out_value.shape()) {
    throw ShapeError("seed gradient " + to_string(seed.shape()) + " does not match output " +
                     to_string(out_value.shape()));
  }

  grads_.assign(output.index + 1, Tensor<T>{});
  grads_[output.index] = seed;
  Gradients<T> result;
  for (std::size_t i = output.index + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad) continue;
    NodeId id{static_cast<std::uint32_t>(i)};
    if (n.kind == OpKind::leaf) {
      Tensor<T> g = grads_[i].empty() ? Tensor<T>(value(id).shape(), T(0)) : std::move(grads_[i]);
      result.grads_.emplace(id, std::move(g));
      continue;
    }
    if (grads_[i].empty()) continue;
    Tensor<T> g = std::move(grads_[i]);
    n.backward(*this, id, g);
  }
  // Leaves created after `output` cannot influence it.
  for (std::size_t i = output.index + 1; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.kind == OpKind::leaf && n.requires_grad) {
      NodeId id{static_cast<std::uint32_t>(i)};
      result.grads_.emplace(id, Tensor<T>(value(id).shape(), T(0)));
    }
  }
  grads_.clear();
  return result;
}

template <typename T>
Gradients<T> Graph<T>::backward(NodeId output) {
  const Tensor<T>& v = value(output);
  if (v.size() != 1) {
    throw ShapeError("implicit seed needs a single-element output, got " + to_string(v.shape()));
  }
  return backward(output, Tensor<T>(v.shape(), T(1)));
}

template class Gradients<float>;
template class Gradients<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace evasion
