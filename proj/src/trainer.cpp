#include "evasion/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "evasion/errors.hpp"
#include "evasion/graph.hpp"
#include "evasion/ops.hpp"

namespace evasion {

namespace {

template <typename T>
Tensor<T> gather(std::span<const Sample> samples, std::span<const std::size_t> indices) {
  Tensor<float> batch = stack_images(samples, indices);
  if constexpr (std::is_same_v<T, float>) {
    return batch;
  } else {
    return batch.template cast<T>();
  }
}

template <typename T>
double metric(const Model<T>& model, std::span<const Sample> dataset) {
  return model.head() == Head::classification ? evaluate_classifier(model, dataset).accuracy
                                              : evaluate_regressor(model, dataset).mse;
}

std::vector<Sample> subset(std::span<const Sample> samples, const std::vector<std::size_t>& indices) {
  std::vector<Sample> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(samples[i]);
  return out;
}

}  // namespace

std::string_view to_string(LossKind loss) {
  return loss == LossKind::cross_entropy ? "cross_entropy" : "mse";
}

LossKind loss_for(Head head) {
  return head == Head::classification ? LossKind::cross_entropy : LossKind::mse;
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be finite and >= 0");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
}

std::string TrainReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  const bool with_val = std::any_of(epochs.begin(), epochs.end(), [](const EpochRecord& e) { return e.val_metric; });
  out << (with_val ? "epoch,loss,val_metric\n" : "epoch,loss\n");
  for (const auto& e : epochs) {
    out << e.epoch << ',' << e.loss;
    if (with_val) {
      out << ',';
      if (e.val_metric) out << *e.val_metric;
    }
    out << '\n';
  }
  return out.str();
}

template <typename T>
TrainReport train(Model<T>& model, std::span<const Sample> dataset, const TrainConfig& config,
                  std::span<const Sample> validation) {
  config.validate();
  if (dataset.empty()) throw std::invalid_argument("cannot train on an empty dataset");
  if (config.loss != loss_for(model.head())) {
    throw ConfigError("loss " + std::string(to_string(config.loss)) + " does not match a " +
                      std::string(to_string(model.head())) + " head");
  }

  auto& params = model.parameters();
  std::vector<Tensor<T>> velocity;
  for (const auto& p : params) velocity.emplace_back(p.value.shape());

  const std::size_t n = dataset.size();
  const std::size_t batch = std::min(config.batch_size, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(config.seed);
  const T lr = static_cast<T>(config.learning_rate);
  const T mu = static_cast<T>(config.momentum);

  TrainReport report;
  report.head = model.head();
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t b = 0;
    for (std::size_t start = 0; start < n; start += batch, ++b) {
      const std::size_t count = std::min(batch, n - start);
      const std::span<const std::size_t> idx(order.data() + start, count);

      Graph<T> graph;
      const NodeId input = graph.constant(gather<T>(dataset, idx));
      const std::uint64_t dropout_seed = rng();
      const auto binding = model.bind(graph, input, Mode::train, dropout_seed, true);
      NodeId loss;
      if (config.loss == LossKind::cross_entropy) {
        std::vector<std::size_t> labels;
        for (auto i : idx) labels.push_back(static_cast<std::size_t>(dataset[i].label));
        loss = softmax_cross_entropy(graph, binding.logits, std::move(labels));
      } else {
        std::vector<T> targets;
        for (auto i : idx) targets.push_back(static_cast<T>(dataset[i].scaled_angle));
        loss = mean_squared_error(graph, binding.output, std::move(targets));
      }
      const double value = static_cast<double>(graph.value(loss)[0]);
      if (!std::isfinite(value)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b + 1));
      }
      loss_sum += value * static_cast<double>(count);

      const auto grads = graph.backward(loss);
      for (std::size_t p = 0; p < params.size(); ++p) {
        if (!params[p].trainable) continue;
        const auto& g = grads.at(binding.parameter_nodes[p]);
        auto v = velocity[p].data();
        auto theta = params[p].value.data();
        for (std::size_t i = 0; i < v.size(); ++i) {
          v[i] = mu * v[i] - lr * g[i];
          theta[i] += v[i];
        }
      }
    }
    EpochRecord record{epoch, loss_sum / static_cast<double>(n), std::nullopt};
    if (!validation.empty()) record.val_metric = metric(model, validation);
    report.epochs.push_back(record);
  }

  if (!validation.empty()) {
    report.final_metric = report.epochs.empty() ? metric(model, validation) : *report.epochs.back().val_metric;
  } else {
    report.final_metric = metric(model, dataset);
  }
  return report;
}

template <typename T>
ClassifierEvaluation evaluate_classifier(const Model<T>& model, std::span<const Sample> dataset) {
  if (model.head() != Head::classification) throw std::invalid_argument("evaluate_classifier needs a classification model");
  if (dataset.empty()) throw std::invalid_argument("cannot evaluate an empty dataset");
  std::vector<std::size_t> all(dataset.size());
  std::iota(all.begin(), all.end(), 0);
  const Tensor<T> probs = model.probabilities(gather<T>(dataset, all));
  ClassifierEvaluation out;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const std::span<const T> row(probs.raw() + i * kNumDirections, kNumDirections);
    const Direction predicted = argmax_direction(row);
    const Direction truth = dataset[i].label;
    std::array<double, kNumDirections> score{};
    for (std::size_t c = 0; c < kNumDirections; ++c) score[c] = static_cast<double>(row[c]);
    out.scores.push_back(score);
    out.labels.push_back(truth);
    out.predictions.push_back(predicted);
    ++out.confusion[static_cast<std::size_t>(truth)][static_cast<std::size_t>(predicted)];
    if (predicted == truth) ++correct;
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(dataset.size());
  return out;
}

template <typename T>
RegressorEvaluation evaluate_regressor(const Model<T>& model, std::span<const Sample> dataset) {
  if (model.head() != Head::regression) throw std::invalid_argument("evaluate_regressor needs a regression model");
  if (dataset.empty()) throw std::invalid_argument("cannot evaluate an empty dataset");
  std::vector<std::size_t> all(dataset.size());
  std::iota(all.begin(), all.end(), 0);
  const Tensor<T> preds = model.logits(gather<T>(dataset, all));
  RegressorEvaluation out;
  double sum = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const double p = static_cast<double>(preds[i]);
    const double r = (p - dataset[i].scaled_angle) * (p - dataset[i].scaled_angle);
    out.predictions.push_back(p);
    out.squared_residuals.push_back(r);
    sum += r;
  }
  out.mse = sum / static_cast<double>(dataset.size());
  return out;
}

CrossValidation cross_validate(const ModelBuilder& builder, std::span<const Sample> dataset, std::size_t k,
                               const TrainConfig& config) {
  const auto folds = kfold_split(dataset.size(), k, config.seed);
  CrossValidation cv;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    Model<float> model = builder(config.seed + f);
    TrainConfig fold_config = config;
    fold_config.seed = config.seed + f;
    const auto train_set = subset(dataset, folds[f].train);
    const auto val_set = subset(dataset, folds[f].validation);
    TrainReport report = train(model, train_set, fold_config, val_set);
    report.fold = f;
    cv.reports.push_back(std::move(report));
  }
  double sum = 0;
  for (const auto& r : cv.reports) sum += r.final_metric;
  cv.mean = sum / static_cast<double>(cv.reports.size());
  double ss = 0;
  for (const auto& r : cv.reports) ss += (r.final_metric - cv.mean) * (r.final_metric - cv.mean);
  cv.stddev = std::sqrt(ss / static_cast<double>(cv.reports.size()));
  return cv;
}

template TrainReport train<float>(Model<float>&, std::span<const Sample>, const TrainConfig&, std::span<const Sample>);
template TrainReport train<double>(Model<double>&, std::span<const Sample>, const TrainConfig&, std::span<const Sample>);
template ClassifierEvaluation evaluate_classifier<float>(const Model<float>&, std::span<const Sample>);
template ClassifierEvaluation evaluate_classifier<double>(const Model<double>&, std::span<const Sample>);
template RegressorEvaluation evaluate_regressor<float>(const Model<float>&, std::span<const Sample>);
template RegressorEvaluation evaluate_regressor<double>(const Model<double>&, std::span<const Sample>);

}  // namespace evasion
