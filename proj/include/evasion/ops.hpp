#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "evasion/graph.hpp"

namespace evasion {

enum class Padding { same, valid };

struct Conv2dOptions {
  std::size_t stride = 1;
  Padding padding = Padding::same;
};

/// Output spatial extent of a convolution along one axis (TensorFlow rules:
/// same -> ceil(n / stride), valid -> (n - k) / stride + 1).
std::size_t conv_output_extent(std::size_t input, std::size_t kernel, std::size_t stride, Padding padding);

// Image-like tensors are H x W x C or N x H x W x C; outputs keep the input rank.

/// Filters are KH x KW x C x F. `bias`, when given, has F entries.
template <typename T>
NodeId conv2d(Graph<T>& g, NodeId input, NodeId filters, Conv2dOptions options = {});
template <typename T>
NodeId conv2d(Graph<T>& g, NodeId input, NodeId filters, NodeId bias, Conv2dOptions options = {});

/// 2x2 window, stride 2. Ties route to the lowest flat index of the window.
template <typename T>
NodeId maxpool2x2(Graph<T>& g, NodeId input);

/// max(v, 0); the subgradient at 0 is 0.
template <typename T>
NodeId relu(Graph<T>& g, NodeId input);

/// x W + b for x of shape n or N x n, W of shape n x m, b of shape m.
template <typename T>
NodeId dense(Graph<T>& g, NodeId input, NodeId weights, NodeId bias);

/// Softmax over the last axis (max-subtracted).
template <typename T>
NodeId softmax(Graph<T>& g, NodeId logits);

template <typename T>
struct BatchNormOptions {
  T momentum = T(0.99);
  T epsilon = T(1e-5);
};

/// Normalizes over every axis but the last. Train mode uses batch statistics
/// and folds them into the running statistics once, when the node is
/// recorded (running = momentum * running + (1 - momentum) * batch). Infer
/// mode reads the running statistics at evaluation time. Both running
/// tensors must outlive the graph.
template <typename T>
NodeId batch_norm(Graph<T>& g, NodeId input, NodeId gamma, NodeId beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, Mode mode, BatchNormOptions<T> options = {});
/// Infer-mode batch norm over read-only running statistics.
template <typename T>
NodeId batch_norm(Graph<T>& g, NodeId input, NodeId gamma, NodeId beta, const Tensor<T>& running_mean,
                  const Tensor<T>& running_var, BatchNormOptions<T> options = {});

/// Inverted dropout. The mask is drawn from `seed` when the node is recorded
/// and reused on re-evaluation. Infer mode is the identity.
template <typename T>
NodeId dropout(Graph<T>& g, NodeId input, double fraction, Mode mode, std::uint64_t seed);

template <typename T>
NodeId reshape(Graph<T>& g, NodeId input, Shape shape);

/// N x ... -> N x (product of the rest).
template <typename T>
NodeId flatten(Graph<T>& g, NodeId input);

/// (tanh(w) + 1) / 2, mapping R onto [0, 1].
template <typename T>
NodeId tanh_box(Graph<T>& g, NodeId input);

template <typename T>
NodeId add(Graph<T>& g, NodeId a, NodeId b);
template <typename T>
NodeId subtract(Graph<T>& g, NodeId a, NodeId b);
template <typename T>
NodeId scale(Graph<T>& g, NodeId a, T factor);

/// Euclidean norm over all elements. Subgradient 0 at the origin.
template <typename T>
NodeId l2_norm(Graph<T>& g, NodeId input);

/// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
template <typename T>
NodeId softmax_cross_entropy(Graph<T>& g, NodeId logits, std::vector<std::size_t> labels);

/// Mean over the batch of (prediction - target)^2. Predictions are N or N x 1.
template <typename T>
NodeId mean_squared_error(Graph<T>& g, NodeId predictions, std::vector<T> targets);

/// (max_{j != target} z_j - z_target)^+ for a single logit vector (m or 1 x m).
template <typename T>
NodeId hinge_logit_loss(Graph<T>& g, NodeId logits, std::size_t target);

/// (prediction - y)^2 for a single scalar prediction.
template <typename T>
NodeId residual_loss(Graph<T>& g, NodeId prediction, T y);

}  // namespace evasion
