#include "evasion/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <stdexcept>

namespace evasion {

bool GradientCheckReport::passed() const {
  return std::all_of(coordinates.begin(), coordinates.end(),
                     [](const CoordinateCheck& c) { return c.passed || c.kink; });
}

namespace {

std::vector<std::size_t> pick_coordinates(std::size_t n, const GradientCheckOptions& options) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (options.max_coordinates == 0 || options.max_coordinates >= n) return all;
  std::mt19937_64 rng(options.seed);
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(options.max_coordinates);
  std::sort(all.begin(), all.end());
  return all;
}

GradientCheckReport run_check(Graph<double>& graph, NodeId loss, NodeId leaf, const GradientCheckOptions& options,
                              const std::function<void(std::size_t, double)>& set,
                              const std::function<double(std::size_t)>& get, std::size_t count) {
  if (graph.value(loss).size() != 1) throw std::invalid_argument("finite_difference_check needs a scalar loss");
  graph.forward();
  const double base = graph.value(loss)[0];
  const Tensor<double> analytic = graph.backward(loss).take(leaf);
  const double h = options.step;

  auto evaluate = [&](std::size_t i, double v) {
    set(i, v);
    graph.forward();
    return graph.value(loss)[0];
  };

  GradientCheckReport report;
  for (std::size_t i : pick_coordinates(count, options)) {
    const double original = get(i);
    const double plus = evaluate(i, original + h);
    const double minus = evaluate(i, original - h);
    set(i, original);

    CoordinateCheck c;
    c.index = i;
    c.analytic = analytic[i];
    c.numeric = (plus - minus) / (2 * h);
    const double error = std::abs(c.analytic - c.numeric);
    const double denom = std::max({std::abs(c.analytic), std::abs(c.numeric), options.absolute_floor});
    c.relative_error = error / denom;
    c.passed = c.relative_error < options.tolerance;
    if (!c.passed) {
      const double forward_slope = (plus - base) / h;
      const double backward_slope = (base - minus) / h;
      c.kink = std::abs(forward_slope - backward_slope) >= error;
    }
    if (c.kink) {
      ++report.excluded;
    } else {
      ++report.checked;
      report.max_relative_error = std::max(report.max_relative_error, c.relative_error);
    }
    report.coordinates.push_back(c);
  }
  graph.forward();
  return report;
}

}  // namespace

GradientCheckReport finite_difference_check(Graph<double>& graph, NodeId loss, NodeId leaf,
                                            const GradientCheckOptions& options) {
  Tensor<double> working = graph.value(leaf);
  auto set = [&](std::size_t i, double v) {
    working[i] = v;
    graph.set_value(leaf, working);
  };
  auto get = [&](std::size_t i) { return working[i]; };
  return run_check(graph, loss, leaf, options, set, get, working.size());
}

GradientCheckReport finite_difference_check(Graph<double>& graph, NodeId loss, NodeId leaf, Tensor<double>& storage,
                                            const GradientCheckOptions& options) {
  if (&graph.value(leaf) != &storage) {
    throw std::invalid_argument("finite_difference_check: storage is not the tensor borrowed by the leaf");
  }
  auto set = [&](std::size_t i, double v) { storage[i] = v; };
  auto get = [&](std::size_t i) { return storage[i]; };
  return run_check(graph, loss, leaf, options, set, get, storage.size());
}

}  // namespace evasion
