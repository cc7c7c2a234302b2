#include "evasion/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "evasion/errors.hpp"

namespace evasion {

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  return out;
}

}  // namespace

std::vector<SuccessPoint> success_vs_distance(std::span<const AttackResult> results, std::span<const double> epsilons) {
  if (results.empty()) throw std::invalid_argument("success_vs_distance needs at least one result");
  std::vector<SuccessPoint> curve;
  for (double eps : epsilons) {
    std::size_t hits = 0;
    for (const auto& r : results) {
      if (r.success && r.l2_norm <= eps) ++hits;
    }
    curve.push_back({eps, static_cast<double>(hits) / static_cast<double>(results.size())});
  }
  return curve;
}

RocCurve micro_roc(std::span<const ClassScores> scores, std::span<const Direction> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("micro_roc needs one label per score vector");
  if (scores.empty()) throw std::invalid_argument("micro_roc needs at least one sample");
  struct Case {
    double score;
    bool positive;
  };
  std::vector<Case> cases;
  cases.reserve(scores.size() * kNumDirections);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    for (std::size_t c = 0; c < kNumDirections; ++c) {
      if (std::isnan(scores[i][c])) throw std::invalid_argument("micro_roc score is NaN");
      cases.push_back({scores[i][c], static_cast<std::size_t>(labels[i]) == c});
    }
  }
  const auto positives = static_cast<double>(std::count_if(cases.begin(), cases.end(), [](const Case& k) { return k.positive; }));
  const double negatives = static_cast<double>(cases.size()) - positives;
  if (positives == 0 || negatives == 0) throw std::invalid_argument("micro_roc needs positive and negative cases");
  std::sort(cases.begin(), cases.end(), [](const Case& a, const Case& b) { return a.score > b.score; });

  RocCurve roc;
  roc.points.push_back({0, 0});
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < cases.size();) {
    const double threshold = cases[i].score;
    for (; i < cases.size() && cases[i].score == threshold; ++i) (cases[i].positive ? tp : fp) += 1;
    roc.points.push_back({fp / negatives, tp / positives});
  }
  for (std::size_t i = 1; i < roc.points.size(); ++i) {
    const auto& a = roc.points[i - 1];
    const auto& b = roc.points[i];
    roc.auc += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2;
  }
  return roc;
}

MseCdf mse_cdf(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("mse_cdf needs at least one value");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  MseCdf cdf;
  const double n = static_cast<double>(sorted.size());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (i + 1 < sorted.size() && sorted[i + 1] == sorted[i]) continue;
    cdf.points.push_back({sorted[i], static_cast<double>(i + 1) / n});
  }
  cdf.max = sorted.back();
  return cdf;
}

double nearest_rank(std::vector<double> values, double percentile) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty sequence");
  if (!(percentile > 0 && percentile <= 100)) throw std::invalid_argument("percentile must lie in (0, 100]");
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  // Guard against p * n / 100 landing a rounding error above an integer.
  auto rank = static_cast<std::size_t>(std::ceil(percentile * n / 100.0 - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

RatioTable ratio_percentiles(std::span<const double> ratios, std::span<const double> l2,
                             std::span<const double> percentiles) {
  if (ratios.size() != l2.size()) throw std::invalid_argument("ratio and perturbation sequences differ in length");
  if (ratios.empty()) throw std::invalid_argument("ratio_percentiles needs at least one image");
  RatioTable table;
  const std::vector<double> r(ratios.begin(), ratios.end());
  const std::vector<double> d(l2.begin(), l2.end());
  for (double p : percentiles) table.rows.push_back({p, nearest_rank(r, p), nearest_rank(d, p)});
  table.max_ratio = *std::max_element(r.begin(), r.end());
  return table;
}

RatioTable ratio_percentiles(std::span<const AttackResult> results, std::span<const double> percentiles) {
  std::vector<double> ratios, l2;
  std::size_t excluded = 0;
  for (const auto& r : results) {
    if (r.mode != AttackMode::regression) throw std::invalid_argument("ratio_percentiles needs regression results");
    if (r.clean_mse == 0) {
      ++excluded;
      continue;
    }
    ratios.push_back(r.mse_ratio());
    l2.push_back(r.l2_norm);
  }
  if (ratios.empty()) throw std::invalid_argument("every image has zero clean MSE");
  RatioTable table = ratio_percentiles(ratios, l2, percentiles);
  table.excluded = excluded;
  return table;
}

void write_report(const std::filesystem::path& dir, const EvalReport& report) {
  std::filesystem::create_directories(dir);
  auto write_roc = [&](const char* name, const RocCurve& roc) {
    auto out = open_output(dir / name);
    out << "fpr,tpr\n";
    for (const auto& p : roc.points) out << fmt(p.fpr) << ',' << fmt(p.tpr) << '\n';
  };
  auto write_cdf = [&](const char* name, const MseCdf& cdf) {
    auto out = open_output(dir / name);
    out << "mse,fraction\n";
    for (const auto& p : cdf.points) out << fmt(p.mse) << ',' << fmt(p.fraction) << '\n';
  };
  if (report.roc_clean) write_roc("roc_clean.csv", *report.roc_clean);
  if (report.roc_attacked) write_roc("roc_attacked.csv", *report.roc_attacked);
  if (!report.success_curve.empty()) {
    auto out = open_output(dir / "success_curve.csv");
    out << "epsilon,success\n";
    for (const auto& p : report.success_curve) out << fmt(p.epsilon) << ',' << fmt(p.success) << '\n';
  }
  if (report.mse_cdf_clean) write_cdf("mse_cdf_clean.csv", *report.mse_cdf_clean);
  if (report.mse_cdf_attacked) write_cdf("mse_cdf_attacked.csv", *report.mse_cdf_attacked);
  if (report.ratios) {
    auto out = open_output(dir / "ratios.csv");
    out << "percentile,mse_ratio,l2\n";
    for (const auto& row : report.ratios->rows) out << fmt(row.percentile) << ',' << fmt(row.mse_ratio) << ',' << fmt(row.l2) << '\n';
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  auto out = open_output(dir / "summary.txt");
  out << "auc_clean=" << fmt(report.roc_clean ? report.roc_clean->auc : nan) << '\n';
  out << "auc_attacked=" << fmt(report.roc_attacked ? report.roc_attacked->auc : nan) << '\n';
  out << "max_ratio=" << fmt(report.ratios ? report.ratios->max_ratio : nan) << '\n';
  out << "n_images=" << report.n_images << '\n';
  out << "success_rate=" << fmt(report.success_rate.value_or(nan)) << '\n';
}

}  // namespace evasion
