#include "evasion/attack.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <thread>

#include "evasion/errors.hpp"
#include "evasion/ops.hpp"

namespace evasion {

namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEpsilon = 1e-8;
constexpr double kPreimageClamp = 1.0 - 1e-6;

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

template <typename T>
Tensor<float> as_float(const Tensor<T>& t) {
  if constexpr (std::is_same_v<T, float>) {
    return t;
  } else {
    return t.template cast<float>();
  }
}

/// Fills the prediction fields of `result` from its adversarial image.
template <typename T>
void finalize(const Model<T>& model, const Tensor<T>& image, const Tensor<T>& adversarial, const Objective& objective,
              const AttackConfig& config, AttackResult& result) {
  result.adversarial = as_float(adversarial);
  const Tensor<float> original = as_float(image);
  result.sigma = Tensor<float>(original.shape());
  for (std::size_t i = 0; i < original.size(); ++i) result.sigma[i] = result.adversarial[i] - original[i];
  result.l2_norm = l2_distance(result.adversarial, original);

  if (const auto* t = std::get_if<TargetClass>(&objective)) {
    result.mode = AttackMode::targeted_class;
    result.target = t->target;
    result.original_class = model.predict_direction(image).direction;
    result.adversarial_class = model.predict_direction(adversarial).direction;
    result.success = result.adversarial_class == t->target;
  } else {
    const double y = std::get<MaximizeResidual>(objective).y;
    result.mode = AttackMode::regression;
    result.y = y;
    result.original_value = static_cast<double>(model.predict_value(image));
    result.adversarial_value = static_cast<double>(model.predict_value(adversarial));
    result.clean_mse = (result.original_value - y) * (result.original_value - y);
    result.adversarial_mse = (result.adversarial_value - y) * (result.adversarial_value - y);
    result.success = result.mse_ratio() >= config.tau;
  }
}

template <typename T>
AttackResult search_c(const Model<T>& model, const Tensor<T>& image, const Objective& objective,
                      const AttackConfig& config) {
  const auto start = Clock::now();
  double lower = 0;
  double upper = std::numeric_limits<double>::infinity();
  double c = config.c_initial;
  std::optional<AttackResult> best;
  AttackResult last;
  std::vector<double> history;
  std::size_t iterations = 0;
  for (std::size_t step = 0; step < config.binary_search_steps; ++step) {
    AttackResult r = optimize_at_c(model, image, objective, c, config);
    history.push_back(c);
    iterations += r.iterations;
    if (r.success) {
      if (!best || r.l2_norm < best->l2_norm) best = r;
      upper = std::min(upper, c);
      c = (lower + upper) / 2;
    } else {
      lower = std::max(lower, c);
      c = std::isinf(upper) ? c * 10 : (lower + upper) / 2;
    }
    last = std::move(r);
  }
  AttackResult out = best ? std::move(*best) : std::move(last);
  out.iterations = iterations;
  out.c_history = std::move(history);
  out.wall_time_ms = elapsed_ms(start);
  return out;
}

}  // namespace

std::string_view to_string(AttackMode mode) {
  return mode == AttackMode::targeted_class ? "targeted_class" : "regression";
}

std::optional<AttackMode> parse_attack_mode(std::string_view s) {
  if (s == "targeted_class" || s == "classification" || s == "classify") return AttackMode::targeted_class;
  if (s == "regression" || s == "regress") return AttackMode::regression;
  return std::nullopt;
}

void AttackConfig::validate() const {
  if (!(c_initial > 0) || !std::isfinite(c_initial)) throw ConfigError("c_initial must be positive");
  if (binary_search_steps == 0) throw ConfigError("binary search needs at least one step");
  if (!(fixed_c >= 0) || !std::isfinite(fixed_c)) throw ConfigError("fixed_c must be finite and >= 0");
  if (max_iterations == 0) throw ConfigError("max_iterations must be at least 1");
  if (!(step_size > 0) || !std::isfinite(step_size)) throw ConfigError("step size must be positive");
  if (abort_window == 0) throw ConfigError("abort window must be at least 1");
  if (!(tau > 0) || !std::isfinite(tau)) throw ConfigError("tau must be positive");
}

double AttackResult::mse_ratio() const {
  if (clean_mse > 0) return adversarial_mse / clean_mse;
  return adversarial_mse > 0 ? std::numeric_limits<double>::infinity() : 1.0;
}

template <typename T>
double l2_distance(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("l2_distance shape mismatch: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  double sum = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    sum += d * d;
  }
  return std::sqrt(sum);
}

template <typename T>
Tensor<T> tanh_preimage(const Tensor<T>& image) {
  Tensor<T> w(image.shape());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double v = std::clamp(2.0 * static_cast<double>(image[i]) - 1.0, -kPreimageClamp, kPreimageClamp);
    w[i] = static_cast<T>(std::atanh(v));
  }
  return w;
}

template <typename T>
ObjectiveNodes record_objective(Graph<T>& graph, const Model<T>& model, const Tensor<T>& image, NodeId w,
                                const Objective& objective, T c) {
  if (graph.value(w).shape() != image.shape()) {
    throw ShapeError("attack variable " + to_string(graph.value(w).shape()) + " does not match image " +
                     to_string(image.shape()));
  }
  ObjectiveNodes n;
  n.adversarial = tanh_box(graph, w);
  const NodeId original = graph.constant(image);
  n.norm = l2_norm(graph, subtract(graph, n.adversarial, original));
  const auto binding = model.bind(graph, n.adversarial);
  n.output = binding.logits;
  if (const auto* t = std::get_if<TargetClass>(&objective)) {
    if (model.head() != Head::classification) throw std::invalid_argument("targeted attack needs a classification model");
    n.loss = hinge_logit_loss(graph, n.output, static_cast<std::size_t>(t->target));
    n.objective = add(graph, n.norm, scale(graph, n.loss, c));
  } else {
    if (model.head() != Head::regression) throw std::invalid_argument("regression attack needs a regression model");
    n.loss = residual_loss(graph, n.output, static_cast<T>(std::get<MaximizeResidual>(objective).y));
    n.objective = subtract(graph, n.norm, scale(graph, n.loss, c));
  }
  return n;
}

template <typename T>
AttackResult optimize_at_c(const Model<T>& model, const Tensor<T>& image, const Objective& objective, double c,
                           const AttackConfig& config) {
  config.validate();
  if (!(c >= 0) || !std::isfinite(c)) throw std::invalid_argument("penalty constant must be finite and >= 0");
  model.validate_images(image);
  const auto start = Clock::now();
  const bool classify = std::holds_alternative<TargetClass>(objective);
  const Direction target = classify ? std::get<TargetClass>(objective).target : Direction::straight;

  Graph<T> graph;
  Tensor<T> w = tanh_preimage(image);
  const NodeId w_node = graph.variable(w);
  const ObjectiveNodes nodes = record_objective(graph, model, image, w_node, objective, static_cast<T>(c));

  std::vector<double> m(w.size(), 0.0), v(w.size(), 0.0);
  double beta1_power = 1, beta2_power = 1;

  std::optional<Tensor<T>> best;
  bool best_success = false;
  double best_score = std::numeric_limits<double>::infinity();  // L2, objective, or -g
  double previous = 0;
  std::size_t steps = 0;

  for (std::size_t it = 0;; ++it) {
    if (it > 0) {
      graph.set_value(w_node, w);
      graph.forward();
    }
    const double obj = static_cast<double>(graph.value(nodes.objective)[0]);
    if (!std::isfinite(obj)) break;

    if (classify) {
      const double l2 = static_cast<double>(graph.value(nodes.norm)[0]);
      const bool hit = argmax_direction(graph.value(nodes.output).data()) == target;
      if (hit && (!best_success || l2 < best_score)) {
        best = graph.value(nodes.adversarial);
        best_success = true;
        best_score = l2;
      } else if (!best_success && obj < best_score) {
        best = graph.value(nodes.adversarial);
        best_score = obj;
      }
    } else {
      const double score = -static_cast<double>(graph.value(nodes.loss)[0]);
      if (!best || score < best_score) {
        best = graph.value(nodes.adversarial);
        best_score = score;
      }
    }

    if (config.abort_early && it > 0 && it % config.abort_window == 0) {
      if (obj >= previous - config.abort_tolerance * std::abs(previous)) break;
    }
    if (it % config.abort_window == 0) previous = obj;
    if (it == config.max_iterations) break;

    const auto grads = graph.backward(nodes.objective);
    const auto g = grads.at(w_node).data();
    beta1_power *= kAdamBeta1;
    beta2_power *= kAdamBeta2;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      m[i] = kAdamBeta1 * m[i] + (1 - kAdamBeta1) * gi;
      v[i] = kAdamBeta2 * v[i] + (1 - kAdamBeta2) * gi * gi;
      const double m_hat = m[i] / (1 - beta1_power);
      const double v_hat = v[i] / (1 - beta2_power);
      w[i] = static_cast<T>(static_cast<double>(w[i]) - config.step_size * m_hat / (std::sqrt(v_hat) + kAdamEpsilon));
    }
    ++steps;
  }

  AttackResult result;
  finalize(model, image, best ? *best : image, objective, config, result);
  if (!best) result.success = false;
  result.best_c = c;
  result.iterations = steps;
  result.c_history = {c};
  result.wall_time_ms = elapsed_ms(start);
  return result;
}

template <typename T>
AttackResult attack_targeted(const Model<T>& model, const Tensor<T>& image, Direction target,
                             const AttackConfig& config) {
  config.validate();
  if (model.head() != Head::classification) throw std::invalid_argument("targeted attack needs a classification model");
  return search_c(model, image, TargetClass{target}, config);
}

template <typename T>
AttackResult attack_regression(const Model<T>& model, const Tensor<T>& image, double y, const AttackConfig& config) {
  config.validate();
  if (model.head() != Head::regression) throw std::invalid_argument("regression attack needs a regression model");
  if (config.regression_search) return search_c(model, image, MaximizeResidual{y}, config);
  return optimize_at_c(model, image, MaximizeResidual{y}, config.fixed_c, config);
}

std::vector<AttackResult> run_attacks(const Model<float>& model, std::span<const AttackJob> jobs,
                                      const AttackConfig& config, std::size_t workers) {
  config.validate();
  std::vector<AttackResult> results(jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  auto work = [&] {
    for (std::size_t i = next++; i < jobs.size() && !failed; i = next++) {
      try {
        const auto& job = jobs[i];
        if (const auto* t = std::get_if<TargetClass>(&job.objective)) {
          results[i] = attack_targeted(model, job.image, t->target, config);
        } else {
          results[i] = attack_regression(model, job.image, std::get<MaximizeResidual>(job.objective).y, config);
        }
      } catch (...) {
        if (!failed.exchange(true)) failure = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(workers, jobs.size()));
  if (n == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(work);
  }
  if (failure) std::rethrow_exception(failure);
  return results;
}

std::string attack_csv_header() {
  return "source_id,original_class_or_y,target_or_mode,success,l2_norm,best_c,iterations,pre_prediction,"
         "post_prediction,wall_time_ms";
}

std::string attack_csv_row(const std::string& source_id, const AttackResult& r) {
  std::string row = source_id + ",";
  if (r.mode == AttackMode::targeted_class) {
    row += std::string(to_string(r.original_class)) + "," + std::string(to_string(r.target)) + ",";
  } else {
    row += format_number(r.y) + "," + (r.c_history.size() > 1 ? "search" : "fixed") + ",";
  }
  row += std::string(r.success ? "1" : "0") + "," + format_number(r.l2_norm) + "," + format_number(r.best_c) + "," +
         std::to_string(r.iterations) + ",";
  if (r.mode == AttackMode::targeted_class) {
    row += std::string(to_string(r.original_class)) + "," + std::string(to_string(r.adversarial_class)) + ",";
  } else {
    row += format_number(r.original_value) + "," + format_number(r.adversarial_value) + ",";
  }
  char ms[32];
  std::snprintf(ms, sizeof ms, "%.3f", r.wall_time_ms);
  return row + ms;
}

#define EVASION_INSTANTIATE_ATTACK(T)                                                                               \
  template double l2_distance<T>(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> tanh_preimage<T>(const Tensor<T>&);                                                            \
  template ObjectiveNodes record_objective<T>(Graph<T>&, const Model<T>&, const Tensor<T>&, NodeId,                 \
                                              const Objective&, T);                                                 \
  template AttackResult optimize_at_c<T>(const Model<T>&, const Tensor<T>&, const Objective&, double,               \
                                         const AttackConfig&);                                                      \
  template AttackResult attack_targeted<T>(const Model<T>&, const Tensor<T>&, Direction, const AttackConfig&);      \
  template AttackResult attack_regression<T>(const Model<T>&, const Tensor<T>&, double, const AttackConfig&);

EVASION_INSTANTIATE_ATTACK(float)
EVASION_INSTANTIATE_ATTACK(double)

}  // namespace evasion
