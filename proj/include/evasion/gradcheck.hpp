#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "evasion/graph.hpp"

namespace evasion {

struct GradientCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
  double absolute_floor = 1e-6;
  /// 0 checks every coordinate; otherwise a seeded random subset of this size.
  std::size_t max_coordinates = 0;
  std::uint64_t seed = 0;
};

struct CoordinateCheck {
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double relative_error = 0;
  /// One-sided differences disagree enough to explain the mismatch: a
  /// non-differentiable point (relu at 0, max tie, hinge corner).
  bool kink = false;
  bool passed = false;
};

struct GradientCheckReport {
  std::vector<CoordinateCheck> coordinates;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  /// Over non-excluded coordinates.
  double max_relative_error = 0;

  bool passed() const;
};

/// Central differences (L(x+h) - L(x-h)) / 2h against the analytic gradient of
/// the single-element node `loss` with respect to the owned leaf `leaf`.
/// Coordinates whose mismatch is explained by a kink are excluded. The graph
/// is re-evaluated at the original point before returning.
GradientCheckReport finite_difference_check(Graph<double>& graph, NodeId loss, NodeId leaf,
                                            const GradientCheckOptions& options = {});

/// Variant for parameter leaves that borrow `storage`.
GradientCheckReport finite_difference_check(Graph<double>& graph, NodeId loss, NodeId leaf, Tensor<double>& storage,
                                            const GradientCheckOptions& options = {});

}  // namespace evasion
