#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "evasion/attack.hpp"
#include "evasion/model.hpp"

namespace evasion {

struct SuccessPoint {
  double epsilon = 0;
  double success = 0;  // fraction of attempts that succeeded with l2_norm <= epsilon
};

std::vector<SuccessPoint> success_vs_distance(std::span<const AttackResult> results, std::span<const double> epsilons);

struct RocPoint {
  double fpr = 0;
  double tpr = 0;
};

struct RocCurve {
  std::vector<RocPoint> points;  // from (0, 0) to (1, 1)
  double auc = 0;
};

using ClassScores = std::array<double, kNumDirections>;

/// Micro-averaged one-vs-rest ROC: every (sample, class) pair becomes a binary
/// case with that class's score. Thresholds sweep every distinct score in
/// descending order; AUC by the trapezoidal rule.
RocCurve micro_roc(std::span<const ClassScores> scores, std::span<const Direction> labels);

struct CdfPoint {
  double mse = 0;
  double fraction = 0;
};

struct MseCdf {
  std::vector<CdfPoint> points;  // one per distinct value, fraction = #{v <= mse} / n
  double max = 0;
};

MseCdf mse_cdf(std::span<const double> values);

struct RatioRow {
  double percentile = 0;
  double mse_ratio = 0;
  double l2 = 0;
};

struct RatioTable {
  std::vector<RatioRow> rows;
  double max_ratio = 0;
  std::size_t excluded = 0;  // images with zero clean MSE
};

inline constexpr std::array<double, 5> kDefaultPercentiles{10, 25, 50, 75, 90};

/// Nearest-rank value: the ceil(p/100 * n)-th smallest element (1-based).
double nearest_rank(std::vector<double> values, double percentile);

/// Ratios and perturbations are sorted independently.
RatioTable ratio_percentiles(std::span<const double> ratios, std::span<const double> l2,
                             std::span<const double> percentiles = kDefaultPercentiles);
/// Regression results; images with zero clean MSE are excluded and counted.
RatioTable ratio_percentiles(std::span<const AttackResult> results,
                             std::span<const double> percentiles = kDefaultPercentiles);

struct EvalReport {
  std::optional<RocCurve> roc_clean;
  std::optional<RocCurve> roc_attacked;
  std::vector<SuccessPoint> success_curve;
  std::optional<MseCdf> mse_cdf_clean;
  std::optional<MseCdf> mse_cdf_attacked;
  std::optional<RatioTable> ratios;
  std::size_t n_images = 0;
  std::optional<double> success_rate;
};

/// Writes the CSV bundle and summary.txt (auc_clean, auc_attacked, max_ratio,
/// n_images, success_rate; "nan" where not applicable). Absent curves are not
/// written.
void write_report(const std::filesystem::path& dir, const EvalReport& report);

}  // namespace evasion
