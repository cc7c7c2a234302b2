#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "evasion/data.hpp"
#include "evasion/model.hpp"

namespace evasion {

enum class LossKind { cross_entropy, mse };

std::string_view to_string(LossKind loss);
LossKind loss_for(Head head);

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 128;  // clipped to the dataset size
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::cross_entropy;

  /// Throws ConfigError on out-of-range values.
  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss = 0;        // sample-weighted mean over the epoch's batches
  std::optional<double> val_metric;  // accuracy or MSE on the validation set
};

struct TrainReport {
  Head head = Head::classification;
  std::vector<EpochRecord> epochs;
  /// Accuracy (classification) or MSE (regression) in infer mode, on the
  /// validation set when one was given, else on the training set.
  double final_metric = 0;
  std::optional<std::size_t> fold;

  /// "epoch,loss[,val_metric]".
  std::string to_csv() const;
};

/// Mini-batch SGD with classical momentum: v <- mu v - lr g, theta <- theta + v.
/// Batches are reshuffled each epoch from the seed. Throws TrainingError
/// naming the epoch and batch when the loss becomes non-finite.
template <typename T>
TrainReport train(Model<T>& model, std::span<const Sample> dataset, const TrainConfig& config,
                  std::span<const Sample> validation = {});

struct ClassifierEvaluation {
  double accuracy = 0;
  std::array<std::array<std::size_t, kNumDirections>, kNumDirections> confusion{};  // [true][predicted]
  std::vector<std::array<double, kNumDirections>> scores;  // softmax probabilities
  std::vector<Direction> labels;
  std::vector<Direction> predictions;
};

struct RegressorEvaluation {
  double mse = 0;
  std::vector<double> squared_residuals;
  std::vector<double> predictions;
};

template <typename T>
ClassifierEvaluation evaluate_classifier(const Model<T>& model, std::span<const Sample> dataset);
template <typename T>
RegressorEvaluation evaluate_regressor(const Model<T>& model, std::span<const Sample> dataset);

struct CrossValidation {
  std::vector<TrainReport> reports;
  double mean = 0;
  double stddev = 0;  // population
};

using ModelBuilder = std::function<Model<float>(std::uint64_t init_seed)>;

/// One fresh model per fold, trained on the remaining folds and scored on the
/// held-out fold.
CrossValidation cross_validate(const ModelBuilder& builder, std::span<const Sample> dataset, std::size_t k,
                               const TrainConfig& config);

}  // namespace evasion
