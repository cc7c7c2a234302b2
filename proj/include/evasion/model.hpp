#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "evasion/graph.hpp"
#include "evasion/ops.hpp"

namespace evasion {

enum class Architecture { epoch, nvidia };
enum class Head { classification, regression };

/// Steering direction classes, in argmax tie-break order.
enum class Direction : std::uint8_t { left = 0, straight = 1, right = 2 };
inline constexpr std::size_t kNumDirections = 3;

std::string_view to_string(Architecture a);
std::string_view to_string(Head h);
std::string_view to_string(Direction d);
std::optional<Architecture> parse_architecture(std::string_view s);
std::optional<Head> parse_head(std::string_view s);
std::optional<Direction> parse_direction(std::string_view s);

struct Resolution {
  std::size_t height = 0;
  std::size_t width = 0;
  bool operator==(const Resolution&) const = default;
};

struct ConvSpec {
  std::size_t filters = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  Padding padding = Padding::same;
};
struct MaxPoolSpec {};
struct DropoutSpec {
  double fraction = 0;
};
struct DenseSpec {
  std::size_t units = 0;
};
struct BatchNormSpec {};
struct ReluSpec {};
struct SoftmaxSpec {};
struct FlattenSpec {};

using LayerSpec =
    std::variant<ConvSpec, MaxPoolSpec, DropoutSpec, DenseSpec, BatchNormSpec, ReluSpec, SoftmaxSpec, FlattenSpec>;

enum class LayerKind { conv, maxpool, dropout, dense, batchnorm, relu, softmax, flatten };
LayerKind kind_of(const LayerSpec& spec);
std::string_view to_string(LayerKind kind);

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  /// Running statistics are persisted but not trained.
  bool trainable = true;
};

/// Index of the largest probability; ties resolve to the lowest class.
template <typename T>
Direction argmax_direction(std::span<const T> scores);

template <typename T>
struct DirectionPrediction {
  Direction direction = Direction::straight;
  std::array<T, kNumDirections> probabilities{};
};

/// Layer sequence plus parameters. Parameters are read-only during
/// evaluation, so concurrent const calls are safe.
template <typename T>
class Model {
 public:
  struct Binding {
    NodeId output;  // probabilities (classification) or prediction (regression)
    NodeId logits;  // pre-softmax output; equals `output` for regression
    std::vector<NodeId> parameter_nodes;  // parallel to parameters(), trainable only, empty when not requested
  };

  Model(Architecture architecture, Head head, Resolution resolution, std::vector<LayerSpec> layers);

  Architecture architecture() const { return architecture_; }
  Head head() const { return head_; }
  Resolution resolution() const { return resolution_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  /// Per-layer output shapes for a single image (no batch axis).
  const std::vector<Shape>& layer_shapes() const { return layer_shapes_; }
  std::size_t output_size() const { return head_ == Head::classification ? kNumDirections : 1; }

  std::vector<Parameter<T>>& parameters() { return parameters_; }
  const std::vector<Parameter<T>>& parameters() const { return parameters_; }
  Parameter<T>& parameter(std::string_view name);
  const Parameter<T>& parameter(std::string_view name) const;
  /// Number of trainable scalars.
  std::size_t parameter_count() const;

  /// Fan-in scaled uniform init (limit sqrt(6 / fan_in)), zero biases,
  /// batch-norm gamma 1 / beta 0 and running statistics (0, 1).
  void initialize(std::uint64_t seed);

  /// Records the network on `input` (H x W x 3 or N x H x W x 3). Train mode
  /// uses dropout masks derived from `dropout_seed` and updates batch-norm
  /// running statistics.
  Binding bind(Graph<T>& graph, NodeId input, Mode mode, std::uint64_t dropout_seed, bool parameter_grads);
  /// Infer-mode recording over borrowed, read-only parameters.
  Binding bind(Graph<T>& graph, NodeId input) const;

  /// Pre-softmax outputs (classification, N x 3) or predictions (regression,
  /// N x 1); rank-3 input yields a rank-1 result. Infer mode. Pixels must lie
  /// in [0, 1].
  Tensor<T> logits(const Tensor<T>& images) const;
  Tensor<T> probabilities(const Tensor<T>& images) const;
  DirectionPrediction<T> predict_direction(const Tensor<T>& image) const;
  T predict_value(const Tensor<T>& image) const;

  void validate_images(const Tensor<T>& images) const;

  template <typename U>
  Model<U> cast() const {
    Model<U> out(architecture_, head_, resolution_, layers_);
    for (std::size_t i = 0; i < parameters_.size(); ++i) out.parameters()[i].value = parameters_[i].value.template cast<U>();
    return out;
  }

 private:
  template <typename Self>
  static Binding bind_impl(Self& self, Graph<T>& graph, NodeId input, Mode mode, std::uint64_t dropout_seed,
                           bool parameter_grads);

  Architecture architecture_;
  Head head_;
  Resolution resolution_;
  std::vector<LayerSpec> layers_;
  std::vector<Shape> layer_shapes_;
  std::vector<Parameter<T>> parameters_;
};

extern template class Model<float>;
extern template class Model<double>;

/// Three conv/pool/dropout stages (32, 64, 128 filters of 3x3, same padding),
/// dense 1024, then the head. Resolution must be divisible by 8.
Model<float> build_epoch(Head head, Resolution resolution, std::uint64_t init_seed = 0);

/// Input batch norm, convs 24/36/48 (5x5, stride 2) and 64/64 (3x3, stride
/// 1), all valid padding, dense 582/100/50/10, then the head.
Model<float> build_nvidia(Head head, Resolution resolution, std::uint64_t init_seed = 0);

Model<float> build_model(Architecture architecture, Head head, Resolution resolution, std::uint64_t init_seed = 0);

/// Smallest square side the NVIDIA stack accepts.
std::size_t nvidia_minimum_resolution();

}  // namespace evasion
