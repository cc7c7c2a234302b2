#include "evasion/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include "evasion/errors.hpp"

namespace evasion {

std::string_view to_string(Architecture a) {
  return a == Architecture::epoch ? "epoch" : "nvidia";
}

std::string_view to_string(Head h) {
  return h == Head::classification ? "classification" : "regression";
}

std::string_view to_string(Direction d) {
  switch (d) {
    case Direction::left: return "left";
    case Direction::straight: return "straight";
    case Direction::right: return "right";
  }
  return "unknown";
}

std::optional<Architecture> parse_architecture(std::string_view s) {
  if (s == "epoch") return Architecture::epoch;
  if (s == "nvidia") return Architecture::nvidia;
  return std::nullopt;
}

std::optional<Head> parse_head(std::string_view s) {
  if (s == "classification" || s == "classify") return Head::classification;
  if (s == "regression" || s == "regress") return Head::regression;
  return std::nullopt;
}

std::optional<Direction> parse_direction(std::string_view s) {
  if (s == "left") return Direction::left;
  if (s == "straight") return Direction::straight;
  if (s == "right") return Direction::right;
  return std::nullopt;
}

LayerKind kind_of(const LayerSpec& spec) {
  return std::visit(
      [](const auto& s) -> LayerKind {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, ConvSpec>) return LayerKind::conv;
        else if constexpr (std::is_same_v<S, MaxPoolSpec>) return LayerKind::maxpool;
        else if constexpr (std::is_same_v<S, DropoutSpec>) return LayerKind::dropout;
        else if constexpr (std::is_same_v<S, DenseSpec>) return LayerKind::dense;
        else if constexpr (std::is_same_v<S, BatchNormSpec>) return LayerKind::batchnorm;
        else if constexpr (std::is_same_v<S, ReluSpec>) return LayerKind::relu;
        else if constexpr (std::is_same_v<S, SoftmaxSpec>) return LayerKind::softmax;
        else return LayerKind::flatten;
      },
      spec);
}

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::dropout: return "dropout";
    case LayerKind::dense: return "dense";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::softmax: return "softmax";
    case LayerKind::flatten: return "flatten";
  }
  return "unknown";
}

template <typename T>
Direction argmax_direction(std::span<const T> scores) {
  if (scores.size() != kNumDirections) {
    throw ShapeError("direction scores need " + std::to_string(kNumDirections) + " entries, got " +
                     std::to_string(scores.size()));
  }
  std::size_t best = 0;
  for (std::size_t j = 1; j < scores.size(); ++j) {
    if (scores[j] > scores[best]) best = j;
  }
  return static_cast<Direction>(best);
}

template Direction argmax_direction<float>(std::span<const float>);
template Direction argmax_direction<double>(std::span<const double>);

namespace {

std::string layer_name(LayerKind kind, std::size_t index) {
  return std::string(to_string(kind)) + std::to_string(index);
}

}  // namespace

template <typename T>
Model<T>::Model(Architecture architecture, Head head, Resolution resolution, std::vector<LayerSpec> layers)
    : architecture_(architecture), head_(head), resolution_(resolution), layers_(std::move(layers)) {
  if (resolution_.height == 0 || resolution_.width == 0) throw ShapeError("model resolution must be positive");
  Shape shape{resolution_.height, resolution_.width, 3};
  std::size_t conv_index = 0, dense_index = 0, bn_index = 0;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& spec = layers_[i];
    const LayerKind kind = kind_of(spec);
    const std::string where = "layer " + std::to_string(i) + " (" + std::string(to_string(kind)) + ")";
    if (std::holds_alternative<ConvSpec>(spec)) {
      const auto& c = std::get<ConvSpec>(spec);
      if (shape.size() != 3) throw ShapeError(where + " needs an image-shaped input, got " + to_string(shape));
      if (c.padding == Padding::valid && (shape[0] < c.kernel || shape[1] < c.kernel)) {
        throw ShapeError(where + ": input " + to_string(shape) + " smaller than " + std::to_string(c.kernel) + "x" +
                         std::to_string(c.kernel) + " kernel");
      }
      const std::string name = layer_name(kind, conv_index++);
      parameters_.push_back({name + ".weight", Tensor<T>({c.kernel, c.kernel, shape[2], c.filters}), true});
      parameters_.push_back({name + ".bias", Tensor<T>({c.filters}), true});
      shape = {conv_output_extent(shape[0], c.kernel, c.stride, c.padding),
               conv_output_extent(shape[1], c.kernel, c.stride, c.padding), c.filters};
    } else if (std::holds_alternative<MaxPoolSpec>(spec)) {
      if (shape.size() != 3 || shape[0] % 2 != 0 || shape[1] % 2 != 0) {
        throw ShapeError(where + " needs even spatial dimensions, got " + to_string(shape));
      }
      shape = {shape[0] / 2, shape[1] / 2, shape[2]};
    } else if (std::holds_alternative<DropoutSpec>(spec)) {
      const double f = std::get<DropoutSpec>(spec).fraction;
      if (!(f >= 0.0 && f < 1.0)) throw std::invalid_argument(where + ": dropout fraction outside [0, 1)");
    } else if (std::holds_alternative<DenseSpec>(spec)) {
      if (shape.size() != 1) throw ShapeError(where + " needs a flat input, got " + to_string(shape));
      const auto units = std::get<DenseSpec>(spec).units;
      const std::string name = layer_name(kind, dense_index++);
      parameters_.push_back({name + ".weight", Tensor<T>({shape[0], units}), true});
      parameters_.push_back({name + ".bias", Tensor<T>({units}), true});
      shape = {units};
    } else if (std::holds_alternative<BatchNormSpec>(spec)) {
      const std::size_t c = shape.back();
      const std::string name = "bn" + std::to_string(bn_index++);
      parameters_.push_back({name + ".gamma", Tensor<T>({c}, T(1)), true});
      parameters_.push_back({name + ".beta", Tensor<T>({c}), true});
      parameters_.push_back({name + ".running_mean", Tensor<T>({c}), false});
      parameters_.push_back({name + ".running_var", Tensor<T>({c}, T(1)), false});
    } else if (std::holds_alternative<FlattenSpec>(spec)) {
      shape = {element_count(shape)};
    } else if (std::holds_alternative<SoftmaxSpec>(spec)) {
      if (shape.size() != 1 || shape[0] < 2) throw ShapeError(where + " needs a vector of at least 2 logits");
    }
    layer_shapes_.push_back(shape);
  }
  if (shape != Shape{output_size()}) {
    throw ShapeError("model output shape " + to_string(shape) + " does not match the " +
                     std::string(to_string(head_)) + " head");
  }
}

template <typename T>
Parameter<T>& Model<T>::parameter(std::string_view name) {
  for (auto& p : parameters_)
    if (p.name == name) return p;
  throw std::out_of_range("model has no parameter " + std::string(name));
}

template <typename T>
const Parameter<T>& Model<T>::parameter(std::string_view name) const {
  for (const auto& p : parameters_)
    if (p.name == name) return p;
  throw std::out_of_range("model has no parameter " + std::string(name));
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters_)
    if (p.trainable) n += p.value.size();
  return n;
}

template <typename T>
void Model<T>::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : parameters_) {
    const auto& s = p.value.shape();
    const bool is_weight = p.name.ends_with(".weight");
    if (is_weight) {
      const std::size_t fan_in = s.size() == 4 ? s[0] * s[1] * s[2] : s[0];
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (auto& v : p.value.data()) v = static_cast<T>(dist(rng));
    } else if (p.name.ends_with(".gamma") || p.name.ends_with(".running_var")) {
      p.value.fill(T(1));
    } else {
      p.value.fill(T(0));
    }
  }
}

template <typename T>
template <typename Self>
typename Model<T>::Binding Model<T>::bind_impl(Self& self, Graph<T>& graph, NodeId input, Mode mode,
                                               std::uint64_t dropout_seed, bool parameter_grads) {
  const Shape& in_shape = graph.value(input).shape();
  const Shape single{self.resolution_.height, self.resolution_.width, 3};
  NodeId x = input;
  if (in_shape == single) {
    x = reshape(graph, input, Shape{1, single[0], single[1], single[2]});
  } else if (in_shape.size() != 4 || Shape(in_shape.begin() + 1, in_shape.end()) != single) {
    throw ShapeError("model expects images of shape " + to_string(single) + ", got " + to_string(in_shape));
  }

  Binding binding;
  std::vector<NodeId> param_nodes;
  param_nodes.reserve(self.parameters_.size());
  for (auto& p : self.parameters_) {
    param_nodes.push_back(graph.parameter(p.value, parameter_grads && p.trainable));
  }
  if (parameter_grads) binding.parameter_nodes = param_nodes;

  std::size_t next_param = 0;
  NodeId logits = x;
  for (std::size_t i = 0; i < self.layers_.size(); ++i) {
    const LayerSpec& spec = self.layers_[i];
    if (const auto* c = std::get_if<ConvSpec>(&spec)) {
      x = conv2d(graph, x, param_nodes[next_param], param_nodes[next_param + 1], Conv2dOptions{c->stride, c->padding});
      next_param += 2;
    } else if (std::holds_alternative<MaxPoolSpec>(spec)) {
      x = maxpool2x2(graph, x);
    } else if (const auto* d = std::get_if<DropoutSpec>(&spec)) {
      x = dropout(graph, x, d->fraction, mode, dropout_seed + 0x9E3779B97F4A7C15ULL * (i + 1));
    } else if (std::holds_alternative<DenseSpec>(spec)) {
      x = dense(graph, x, param_nodes[next_param], param_nodes[next_param + 1]);
      next_param += 2;
    } else if (std::holds_alternative<BatchNormSpec>(spec)) {
      auto& rm = self.parameters_[next_param + 2].value;
      auto& rv = self.parameters_[next_param + 3].value;
      if constexpr (std::is_const_v<Self>) {
        x = batch_norm(graph, x, param_nodes[next_param], param_nodes[next_param + 1], rm, rv);
      } else {
        x = batch_norm(graph, x, param_nodes[next_param], param_nodes[next_param + 1], rm, rv, mode);
      }
      next_param += 4;
    } else if (std::holds_alternative<ReluSpec>(spec)) {
      x = relu(graph, x);
    } else if (std::holds_alternative<FlattenSpec>(spec)) {
      x = flatten(graph, x);
    } else if (std::holds_alternative<SoftmaxSpec>(spec)) {
      logits = x;
      x = softmax(graph, x);
      continue;
    }
    logits = x;
  }
  binding.output = x;
  binding.logits = logits;
  return binding;
}

template <typename T>
typename Model<T>::Binding Model<T>::bind(Graph<T>& graph, NodeId input, Mode mode, std::uint64_t dropout_seed,
                                          bool parameter_grads) {
  return bind_impl(*this, graph, input, mode, dropout_seed, parameter_grads);
}

template <typename T>
typename Model<T>::Binding Model<T>::bind(Graph<T>& graph, NodeId input) const {
  return bind_impl(*this, graph, input, Mode::infer, 0, false);
}

template <typename T>
void Model<T>::validate_images(const Tensor<T>& images) const {
  for (T v : images.data()) {
    if (!(v >= T(0) && v <= T(1))) {
      throw std::invalid_argument("image pixels must lie in [0, 1], found " + std::to_string(v));
    }
  }
}

template <typename T>
Tensor<T> Model<T>::logits(const Tensor<T>& images) const {
  validate_images(images);
  const Shape single{resolution_.height, resolution_.width, 3};
  const bool batched = images.rank() == 4;
  if (!batched && images.shape() != single) {
    throw ShapeError("model expects images of shape " + to_string(single) + ", got " + to_string(images.shape()));
  }
  const std::size_t n = batched ? images.dim(0) : 1;
  const std::size_t per_image = element_count(single);
  const std::size_t out = output_size();
  constexpr std::size_t chunk = 32;

  std::vector<T> result;
  result.reserve(n * out);
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t count = std::min(chunk, n - start);
    std::vector<T> block(images.raw() + start * per_image, images.raw() + (start + count) * per_image);
    Graph<T> graph;
    NodeId input = graph.constant(Tensor<T>({count, single[0], single[1], single[2]}, std::move(block)));
    const Binding b = bind(graph, input);
    const auto& z = graph.value(b.logits).data();
    result.insert(result.end(), z.begin(), z.end());
  }
  if (!batched) return Tensor<T>({out}, std::move(result));
  return Tensor<T>({n, out}, std::move(result));
}

template <typename T>
Tensor<T> Model<T>::probabilities(const Tensor<T>& images) const {
  if (head_ != Head::classification) throw std::logic_error("probabilities need a classification model");
  Tensor<T> z = logits(images);
  const std::size_t m = kNumDirections;
  for (std::size_t r = 0; r < z.size(); r += m) {
    T top = z[r];
    for (std::size_t j = 1; j < m; ++j) top = std::max(top, z[r + j]);
    T sum = 0;
    for (std::size_t j = 0; j < m; ++j) {
      z[r + j] = std::exp(z[r + j] - top);
      sum += z[r + j];
    }
    for (std::size_t j = 0; j < m; ++j) z[r + j] /= sum;
  }
  return z;
}

template <typename T>
DirectionPrediction<T> Model<T>::predict_direction(const Tensor<T>& image) const {
  if (head_ != Head::classification) throw std::logic_error("predict_direction needs a classification model");
  const Tensor<T> p = probabilities(image);
  if (p.size() != kNumDirections) throw ShapeError("predict_direction takes a single image");
  DirectionPrediction<T> out;
  std::copy(p.data().begin(), p.data().end(), out.probabilities.begin());
  out.direction = argmax_direction<T>(p.data());
  return out;
}

template <typename T>
T Model<T>::predict_value(const Tensor<T>& image) const {
  if (head_ != Head::regression) throw std::logic_error("predict_value needs a regression model");
  const Tensor<T> z = logits(image);
  if (z.size() != 1) throw ShapeError("predict_value takes a single image");
  return z[0];
}

template class Model<float>;
template class Model<double>;

namespace {

std::vector<LayerSpec> with_head(std::vector<LayerSpec> trunk, Head head) {
  if (head == Head::classification) {
    trunk.push_back(DenseSpec{kNumDirections});
    trunk.push_back(SoftmaxSpec{});
  } else {
    trunk.push_back(DenseSpec{1});
  }
  return trunk;
}

}  // namespace

Model<float> build_epoch(Head head, Resolution resolution, std::uint64_t init_seed) {
  if (resolution.height == 0 || resolution.width == 0 || resolution.height % 8 != 0 || resolution.width % 8 != 0) {
    throw ShapeError("epoch model needs a resolution divisible by 8, got " + std::to_string(resolution.height) + "x" +
                     std::to_string(resolution.width));
  }
  std::vector<LayerSpec> trunk{
      ConvSpec{32, 3, 1, Padding::same},  ReluSpec{}, MaxPoolSpec{}, DropoutSpec{0.25},
      ConvSpec{64, 3, 1, Padding::same},  ReluSpec{}, MaxPoolSpec{}, DropoutSpec{0.25},
      ConvSpec{128, 3, 1, Padding::same}, ReluSpec{}, MaxPoolSpec{}, DropoutSpec{0.5},
      FlattenSpec{},                      DenseSpec{1024}, ReluSpec{}, DropoutSpec{0.5},
  };
  Model<float> model(Architecture::epoch, head, resolution, with_head(std::move(trunk), head));
  model.initialize(init_seed);
  return model;
}

std::size_t nvidia_minimum_resolution() {
  // Invert the stack: two 3x3 stride-1 convs need 5, each 5x5 stride-2 conv
  // maps an output extent e back to 2e + 3.
  std::size_t extent = 5;
  for (int i = 0; i < 3; ++i) extent = 2 * extent + 3;
  return extent;
}

Model<float> build_nvidia(Head head, Resolution resolution, std::uint64_t init_seed) {
  const std::size_t minimum = nvidia_minimum_resolution();
  if (resolution.height < minimum || resolution.width < minimum) {
    throw ShapeError("nvidia model needs at least " + std::to_string(minimum) + "x" + std::to_string(minimum) +
                     " input, got " + std::to_string(resolution.height) + "x" + std::to_string(resolution.width));
  }
  std::vector<LayerSpec> trunk{
      BatchNormSpec{},
      ConvSpec{24, 5, 2, Padding::valid}, ReluSpec{},
      ConvSpec{36, 5, 2, Padding::valid}, ReluSpec{},
      ConvSpec{48, 5, 2, Padding::valid}, ReluSpec{},
      ConvSpec{64, 3, 1, Padding::valid}, ReluSpec{},
      ConvSpec{64, 3, 1, Padding::valid}, ReluSpec{},
      FlattenSpec{},
      DenseSpec{582}, ReluSpec{},
      DenseSpec{100}, ReluSpec{},
      DenseSpec{50},  ReluSpec{},
      DenseSpec{10},  ReluSpec{},
  };
  Model<float> model(Architecture::nvidia, head, resolution, with_head(std::move(trunk), head));
  model.initialize(init_seed);
  return model;
}

Model<float> build_model(Architecture architecture, Head head, Resolution resolution, std::uint64_t init_seed) {
  return architecture == Architecture::epoch ? build_epoch(head, resolution, init_seed)
                                             : build_nvidia(head, resolution, init_seed);
}

}  // namespace evasion
