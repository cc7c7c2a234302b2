#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "evasion/graph.hpp"
#include "evasion/model.hpp"
#include "evasion/tensor.hpp"

namespace evasion {

enum class AttackMode { targeted_class, regression };

std::string_view to_string(AttackMode mode);
std::optional<AttackMode> parse_attack_mode(std::string_view s);

struct AttackConfig {
  AttackMode mode = AttackMode::targeted_class;
  double c_initial = 0.001;
  std::size_t binary_search_steps = 9;
  double fixed_c = 100.0;
  std::size_t max_iterations = 1000;
  double step_size = 0.01;
  bool abort_early = true;
  std::size_t abort_window = 100;
  double abort_tolerance = 1e-4;
  double tau = 2.0;              // regression success: adversarial / clean residual ratio
  bool regression_search = false;  // binary-search c for regression instead of fixed_c

  /// Throws ConfigError on out-of-range values.
  void validate() const;
};

struct TargetClass {
  Direction target;
};
struct MaximizeResidual {
  double y;
};
using Objective = std::variant<TargetClass, MaximizeResidual>;

struct AttackResult {
  AttackMode mode = AttackMode::targeted_class;
  Tensor<float> sigma;
  Tensor<float> adversarial;  // image + sigma, in [0, 1]
  double l2_norm = 0;
  bool success = false;
  double best_c = 0;
  std::size_t iterations = 0;  // summed over all rounds
  std::vector<double> c_history;
  double wall_time_ms = 0;

  // Classification.
  Direction target = Direction::straight;
  Direction original_class = Direction::straight;
  Direction adversarial_class = Direction::straight;

  // Regression.
  double y = 0;
  double original_value = 0;
  double adversarial_value = 0;
  double clean_mse = 0;        // (F(x) - y)^2
  double adversarial_mse = 0;  // (F(x + sigma) - y)^2

  /// adversarial_mse / clean_mse; infinite when clean_mse is 0.
  double mse_ratio() const;
};

/// Euclidean norm of a - b. Throws ShapeError on differing shapes.
template <typename T>
double l2_distance(const Tensor<T>& a, const Tensor<T>& b);

/// atanh(2x - 1) with the argument clamped to +-(1 - 1e-6).
template <typename T>
Tensor<T> tanh_preimage(const Tensor<T>& image);

struct ObjectiveNodes {
  NodeId adversarial;  // (tanh(w) + 1) / 2
  NodeId norm;         // ||adversarial - image||_2
  NodeId output;       // logits or regression prediction
  NodeId loss;         // hinge f or residual g
  NodeId objective;    // norm + c f, or norm - c g
};

/// Records the attack objective over the variable leaf `w` (shaped like the
/// image). The model is evaluated in infer mode.
template <typename T>
ObjectiveNodes record_objective(Graph<T>& graph, const Model<T>& model, const Tensor<T>& image, NodeId w,
                                const Objective& objective, T c);

/// Adam over w from the exact preimage of `image`. Classification keeps the
/// lowest-L2 iterate classified as the target (else the lowest-objective one);
/// regression keeps the iterate with the largest residual.
template <typename T>
AttackResult optimize_at_c(const Model<T>& model, const Tensor<T>& image, const Objective& objective, double c,
                           const AttackConfig& config);

/// Binary search over c: x10 until the first success, then bisection.
template <typename T>
AttackResult attack_targeted(const Model<T>& model, const Tensor<T>& image, Direction target,
                             const AttackConfig& config);

/// Fixed c by default; binary search against ratio >= tau when
/// config.regression_search is set.
template <typename T>
AttackResult attack_regression(const Model<T>& model, const Tensor<T>& image, double y, const AttackConfig& config);

struct AttackJob {
  std::string source_id;
  Tensor<float> image;
  Objective objective;
};

/// Runs jobs on `workers` threads; results keep job order.
std::vector<AttackResult> run_attacks(const Model<float>& model, std::span<const AttackJob> jobs,
                                      const AttackConfig& config, std::size_t workers = 1);

/// "source_id,original_class_or_y,target_or_mode,success,l2_norm,best_c,
/// iterations,pre_prediction,post_prediction,wall_time_ms".
std::string attack_csv_header();
std::string attack_csv_row(const std::string& source_id, const AttackResult& result);

}  // namespace evasion
