// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero when any criterion fails. Optional arguments select a subset
// of criteria by number.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "evasion/attack.hpp"
#include "evasion/cli.hpp"
#include "evasion/data.hpp"
#include "evasion/evaluation.hpp"
#include "evasion/gradcheck.hpp"
#include "evasion/image.hpp"
#include "evasion/ops.hpp"
#include "evasion/trainer.hpp"
#include "evasion/weights.hpp"
#include "support.hpp"

using namespace evasion;
using testing::Gen;
using testing::weighted_sum;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------
// Shared fixtures: one synthetic corpus, one classifier, one regressor, and
// the classification attacks against that classifier. Built on first use.

constexpr Resolution kRes{64, 64};
constexpr std::uint64_t kDataSeed = 7;
constexpr std::size_t kTrainCount = 1400;
constexpr std::size_t kValCount = 300;

struct Corpus {
  std::vector<Sample> train, validation, test;
};

const Corpus& corpus() {
  static const Corpus c = [] {
    SyntheticOptions opt;
    opt.count = 2000;
    opt.resolution = kRes;
    opt.seed = kDataSeed;
    auto all = generate_synthetic(opt);
    Corpus out;
    out.train.assign(all.begin(), all.begin() + kTrainCount);
    out.validation.assign(all.begin() + kTrainCount, all.begin() + kTrainCount + kValCount);
    out.test.assign(all.begin() + kTrainCount + kValCount, all.end());
    return out;
  }();
  return c;
}

struct Trained {
  Model<float> model;
  TrainReport report;
  double seconds = 0;
};

TrainConfig classifier_config() {
  TrainConfig c;
  c.learning_rate = 0.01;
  c.momentum = 0.9;
  c.batch_size = 32;
  c.epochs = 5;
  c.seed = 11;
  return c;
}

TrainConfig regressor_config() {
  TrainConfig c;
  c.learning_rate = 0.001;
  c.momentum = 0.9;
  c.batch_size = 32;
  c.epochs = 8;
  c.seed = 13;
  c.loss = LossKind::mse;
  return c;
}

Trained& classifier() {
  static Trained t = [] {
    const auto start = Clock::now();
    Model<float> m = build_epoch(Head::classification, kRes, 1);
    auto report = train(m, std::span<const Sample>(corpus().train), classifier_config(),
                        std::span<const Sample>(corpus().validation));
    return Trained{std::move(m), std::move(report), seconds_since(start)};
  }();
  return t;
}

Trained& regressor() {
  static Trained t = [] {
    const auto start = Clock::now();
    // Conv trunk initialized from the trained classifier.
    Model<float> m = build_epoch(Head::regression, kRes, 2);
    for (auto& p : m.parameters())
      if (p.name.starts_with("conv")) p.value = classifier().model.parameter(p.name).value;
    auto report = train(m, std::span<const Sample>(corpus().train), regressor_config(),
                        std::span<const Sample>(corpus().validation));
    return Trained{std::move(m), std::move(report), seconds_since(start)};
  }();
  return t;
}

AttackConfig classification_attack_config() {
  AttackConfig c;
  c.mode = AttackMode::targeted_class;
  c.c_initial = 0.001;
  c.binary_search_steps = 9;
  c.max_iterations = 200;
  c.abort_window = 20;
  return c;
}

AttackConfig regression_attack_config(double fixed_c) {
  AttackConfig c;
  c.mode = AttackMode::regression;
  c.fixed_c = fixed_c;
  c.max_iterations = 200;
  c.abort_window = 20;
  return c;
}

struct ClassAttacks {
  std::vector<const Sample*> sources;  // parallel to results
  std::vector<AttackResult> results;
  double seconds = 0;
};

ClassAttacks& class_attacks() {
  static ClassAttacks a = [] {
    const Model<float>& model = classifier().model;
    ClassAttacks out;
    std::vector<AttackJob> jobs;
    for (const auto& s : corpus().test) {
      if (jobs.size() == 60) break;
      if (model.predict_direction(s.image).direction != s.label) continue;
      for (std::size_t t = 0; t < kNumDirections; ++t) {
        const auto target = static_cast<Direction>(t);
        if (target == s.label) continue;
        jobs.push_back({s.source_id, s.image, TargetClass{target}});
        out.sources.push_back(&s);
      }
    }
    const auto start = Clock::now();
    out.results = run_attacks(model, jobs, classification_attack_config(), 1);
    out.seconds = seconds_since(start);
    return out;
  }();
  return a;
}

// ---------------------------------------------------------------------------
// 1. Gradient suite.

using Instance = std::function<std::vector<GradientCheckReport>(Gen&)>;

std::vector<GradientCheckReport> check_all(Graph<double>& g, NodeId loss, std::initializer_list<NodeId> leaves) {
  std::vector<GradientCheckReport> out;
  for (NodeId leaf : leaves) out.push_back(finite_difference_check(g, loss, leaf));
  return out;
}

std::size_t extent(Gen& gen, std::size_t lo, std::size_t hi) {
  return gen.index(lo, hi);
}

std::vector<std::pair<std::string, Instance>> gradient_instances() {
  std::vector<std::pair<std::string, Instance>> out;
  out.emplace_back("conv2d", [](Gen& gen) {
    Graph<double> g;
    const std::size_t k = gen.coin() ? 3 : 1 + 2 * gen.index(0, 2);
    const std::size_t h = extent(gen, k, 7), w = extent(gen, k, 7), c = extent(gen, 1, 3), f = extent(gen, 1, 3);
    const Conv2dOptions opt{gen.index(1, 2), gen.coin() ? Padding::same : Padding::valid};
    const NodeId x = g.variable(gen.tensor({h, w, c}));
    const NodeId kk = g.variable(gen.tensor({k, k, c, f}));
    const NodeId b = g.variable(gen.tensor({f}));
    return check_all(g, weighted_sum(g, conv2d(g, x, kk, b, opt), gen), {x, kk, b});
  });
  out.emplace_back("maxpool2x2", [](Gen& gen) {
    Graph<double> g;
    const NodeId x = g.variable(gen.tensor({2 * extent(gen, 1, 3), 2 * extent(gen, 1, 3), extent(gen, 1, 3)}));
    return check_all(g, weighted_sum(g, maxpool2x2(g, x), gen), {x});
  });
  out.emplace_back("relu", [](Gen& gen) {
    Graph<double> g;
    const NodeId x = g.variable(gen.tensor({extent(gen, 1, 20)}));
    return check_all(g, weighted_sum(g, relu(g, x), gen), {x});
  });
  out.emplace_back("dense", [](Gen& gen) {
    Graph<double> g;
    const std::size_t n = extent(gen, 1, 6), m = extent(gen, 1, 5);
    const NodeId x = gen.coin() ? g.variable(gen.tensor({n})) : g.variable(gen.tensor({extent(gen, 1, 4), n}));
    const NodeId w = g.variable(gen.tensor({n, m}));
    const NodeId b = g.variable(gen.tensor({m}));
    return check_all(g, weighted_sum(g, dense(g, x, w, b), gen), {x, w, b});
  });
  out.emplace_back("softmax", [](Gen& gen) {
    Graph<double> g;
    const NodeId x = g.variable(gen.tensor({extent(gen, 1, 4), extent(gen, 2, 5)}, -3, 3));
    return check_all(g, weighted_sum(g, softmax(g, x), gen), {x});
  });
  out.emplace_back("batch_norm (train)", [](Gen& gen) {
    Graph<double> g;
    const std::size_t c = extent(gen, 1, 3);
    Tensor<double> mean({c}, 0.0), var({c}, 1.0);
    const NodeId x = g.variable(gen.tensor({extent(gen, 2, 3), extent(gen, 1, 3), extent(gen, 1, 3), c}));
    const NodeId gamma = g.variable(gen.tensor({c}, 0.5, 1.5));
    const NodeId beta = g.variable(gen.tensor({c}));
    return check_all(g, weighted_sum(g, batch_norm(g, x, gamma, beta, mean, var, Mode::train), gen),
                     {x, gamma, beta});
  });
  out.emplace_back("dropout (train)", [](Gen& gen) {
    Graph<double> g;
    const NodeId x = g.variable(gen.tensor({extent(gen, 1, 6), extent(gen, 1, 6)}));
    const NodeId y = dropout(g, x, gen.uniform(0.1, 0.6), Mode::train, gen.index(0, 1000));
    return check_all(g, weighted_sum(g, y, gen), {x});
  });
  out.emplace_back("flatten/reshape", [](Gen& gen) {
    Graph<double> g;
    const std::size_t n = extent(gen, 1, 3), h = extent(gen, 1, 3), w = extent(gen, 1, 3), c = extent(gen, 1, 3);
    const NodeId x = g.variable(gen.tensor({n, h, w, c}));
    const NodeId y = reshape(g, flatten(g, x), Shape{n * h, w * c});
    return check_all(g, weighted_sum(g, y, gen), {x});
  });
  out.emplace_back("tanh_box", [](Gen& gen) {
    Graph<double> g;
    const NodeId x = g.variable(gen.tensor({extent(gen, 1, 12)}, -3, 3));
    return check_all(g, weighted_sum(g, tanh_box(g, x), gen), {x});
  });
  out.emplace_back("add/subtract/scale", [](Gen& gen) {
    Graph<double> g;
    const Shape s{extent(gen, 1, 4), extent(gen, 1, 4)};
    const NodeId a = g.variable(gen.tensor(s));
    const NodeId b = g.variable(gen.tensor(s));
    const NodeId y = scale(g, subtract(g, add(g, a, b), scale(g, b, gen.uniform(-2, 2))), gen.uniform(-2, 2));
    return check_all(g, weighted_sum(g, y, gen), {a, b});
  });
  out.emplace_back("l2_norm", [](Gen& gen) {
    Graph<double> g;
    const NodeId x = g.variable(gen.tensor({extent(gen, 1, 4), extent(gen, 1, 4)}));
    return check_all(g, l2_norm(g, x), {x});
  });
  out.emplace_back("softmax_cross_entropy", [](Gen& gen) {
    Graph<double> g;
    const std::size_t n = extent(gen, 1, 5);
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < n; ++i) labels.push_back(gen.index(0, 2));
    const NodeId z = g.variable(gen.tensor({n, 3}, -3, 3));
    return check_all(g, softmax_cross_entropy(g, z, labels), {z});
  });
  out.emplace_back("mean_squared_error", [](Gen& gen) {
    Graph<double> g;
    const std::size_t n = extent(gen, 1, 6);
    std::vector<double> targets;
    for (std::size_t i = 0; i < n; ++i) targets.push_back(gen.uniform(-1, 1));
    const NodeId p = g.variable(gen.coin() ? gen.tensor({n}) : gen.tensor({n, 1}));
    return check_all(g, mean_squared_error(g, p, targets), {p});
  });
  out.emplace_back("hinge_logit_loss", [](Gen& gen) {
    Graph<double> g;
    const NodeId z = g.variable(gen.tensor({3}, -2, 2));
    return check_all(g, hinge_logit_loss(g, z, gen.index(0, 2)), {z});
  });
  out.emplace_back("residual_loss", [](Gen& gen) {
    Graph<double> g;
    const NodeId p = g.variable(gen.tensor({1}));
    return check_all(g, residual_loss(g, p, gen.uniform(-1, 1)), {p});
  });
  for (const bool regress : {false, true}) {
    out.emplace_back(regress ? "regression objective" : "classification objective", [regress](Gen& gen) {
      const auto model = regress ? testing::tiny_regressor(gen.index(0, 1u << 30))
                                 : testing::tiny_classifier(gen.index(0, 1u << 30));
      const Tensor<double> image = gen.tensor({4, 4, 3}, 0.05, 0.95);
      Tensor<double> start = tanh_preimage(image);
      for (auto& v : start.data()) v += gen.uniform(-0.3, 0.3);
      const Objective objective = regress ? Objective{MaximizeResidual{gen.uniform(-1, 1)}}
                                          : Objective{TargetClass{static_cast<Direction>(gen.index(0, 2))}};
      Graph<double> g;
      const NodeId w = g.variable(start);
      const auto nodes = record_objective(g, model, image, w, objective, gen.uniform(0.1, 10));
      return check_all(g, nodes.objective, {w});
    });
  }
  return out;
}

Verdict criterion_gradients() {
  const auto start = Clock::now();
  constexpr int kInstances = 20;
  Gen gen(101);
  std::vector<std::string> failed;
  std::size_t checked = 0, excluded = 0;
  double worst = 0;
  const auto instances = gradient_instances();
  for (const auto& [name, instance] : instances) {
    bool ok = true;
    for (int i = 0; i < kInstances; ++i) {
      for (const auto& r : instance(gen)) {
        checked += r.checked;
        excluded += r.excluded;
        worst = std::max(worst, r.max_relative_error);
        ok = ok && r.passed() && r.checked > r.excluded;
      }
    }
    if (!ok) failed.push_back(name);
  }
  const double secs = seconds_since(start);
  std::ostringstream d;
  d << instances.size() << " primitives x " << kInstances << " instances, " << checked << " coordinates, "
    << excluded << " kinks excluded, max rel err " << worst << ", " << secs << " s";
  for (const auto& f : failed) d << ", failed: " << f;
  return {failed.empty() && secs < 60, d.str()};
}

// ---------------------------------------------------------------------------
// 2. Convolution oracle.

Verdict criterion_conv_oracle() {
  const auto start = Clock::now();
  Gen gen(202);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = gen.index(1, 16), w = gen.index(1, 16), c = gen.index(1, 8), f = gen.index(1, 8);
    const std::size_t k = std::min({gen.index(1, 5), h, w});
    const std::size_t stride = gen.index(1, 3);
    const bool same = gen.coin();
    const auto in = gen.tensor({h, w, c});
    const auto filt = gen.tensor({k, k, c, f});
    Graph<double> g;
    const Conv2dOptions opt{stride, same ? Padding::same : Padding::valid};
    const NodeId y = conv2d(g, g.constant(in), g.constant(filt), opt);
    std::size_t oh = 0, ow = 0;
    const auto expect = testing::naive_conv(in.data(), h, w, c, filt.data(), k, f, stride, same, oh, ow);
    const auto& got = g.value(y);
    if (got.shape() != Shape{oh, ow, f}) return {false, "shape mismatch on trial " + std::to_string(trial)};
    for (std::size_t i = 0; i < expect.size(); ++i) {
      const double denom = std::max({std::abs(expect[i]), std::abs(got[i]), 1e-6});
      worst = std::max(worst, std::abs(expect[i] - got[i]) / denom);
    }
  }
  const double secs = seconds_since(start);
  std::ostringstream d;
  d << "100 shapes, max rel err " << worst << ", " << secs << " s";
  return {worst < 1e-6 && secs < 30, d.str()};
}

// ---------------------------------------------------------------------------
// 3. Clean training.

Verdict criterion_training() {
  const auto& t = classifier();
  const double acc = evaluate_classifier(t.model, std::span<const Sample>(corpus().test)).accuracy;
  std::ostringstream d;
  d << "held-out accuracy " << acc << " on " << corpus().test.size() << " images after " << t.report.epochs.size()
    << " epochs, " << t.seconds << " s";
  return {acc >= 0.90 && t.report.epochs.size() <= 50 && t.seconds < 600, d.str()};
}

// ---------------------------------------------------------------------------
// 4. Targeted attack success.

Verdict criterion_attack_success() {
  const auto& a = class_attacks();
  const auto& model = classifier().model;
  std::size_t successes = 0, outside = 0, unverified = 0;
  for (const auto& r : a.results) {
    for (float v : r.adversarial.data())
      if (!(v >= 0.0f && v <= 1.0f)) ++outside;
    if (!r.success) continue;
    ++successes;
    if (model.predict_direction(r.adversarial).direction != r.target) ++unverified;
  }
  const double rate = a.results.empty() ? 0 : static_cast<double>(successes) / static_cast<double>(a.results.size());
  std::ostringstream d;
  d << successes << "/" << a.results.size() << " succeeded (" << rate << "), " << outside
    << " pixels outside [0, 1], " << unverified << " unverified successes, " << a.seconds << " s";
  return {a.results.size() == 60 && rate >= 0.95 && outside == 0 && unverified == 0 && a.seconds < 1200, d.str()};
}

// ---------------------------------------------------------------------------
// 5. Perturbation smallness.

Verdict criterion_smallness() {
  const auto& a = class_attacks();
  double sum = 0;
  std::size_t n = 0;
  for (const auto& r : a.results) {
    if (!r.success) continue;
    sum += r.l2_norm;
    ++n;
  }
  const auto& test = corpus().test;
  double pair_sum = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < test.size(); ++i)
    for (std::size_t j = i + 1; j < test.size(); ++j) {
      if (test[i].label == test[j].label) continue;
      pair_sum += l2_distance(test[i].image, test[j].image);
      ++pairs;
    }
  if (n == 0 || pairs == 0) return {false, "no successful attacks or no cross-class pairs"};
  const double mean_adv = sum / static_cast<double>(n), mean_pair = pair_sum / static_cast<double>(pairs);
  std::ostringstream d;
  d << "mean adversarial L2 " << mean_adv << " vs mean cross-class L2 " << mean_pair << " (ratio "
    << mean_adv / mean_pair << ")";
  return {mean_adv < 0.1 * mean_pair, d.str()};
}

// ---------------------------------------------------------------------------
// 6. AUC degradation.

Verdict criterion_auc() {
  const auto& model = classifier().model;
  const auto clean = evaluate_classifier(model, std::span<const Sample>(corpus().test));
  const RocCurve roc_clean = micro_roc(clean.scores, clean.labels);

  const auto& a = class_attacks();
  std::vector<double> norms;
  for (const auto& r : a.results)
    if (r.success) norms.push_back(r.l2_norm);
  if (norms.empty()) return {false, "no successful attacks"};
  const double cap = nearest_rank(norms, 50);
  std::vector<ClassScores> scores;
  std::vector<Direction> labels;
  for (std::size_t i = 0; i < a.results.size(); ++i) {
    if (a.results[i].l2_norm > cap) continue;
    const auto p = model.predict_direction(a.results[i].adversarial).probabilities;
    scores.push_back({p[0], p[1], p[2]});
    labels.push_back(a.sources[i]->label);
  }
  const RocCurve roc_attacked = micro_roc(scores, labels);
  std::ostringstream d;
  d << "clean AUC " << roc_clean.auc << ", attacked AUC " << roc_attacked.auc << " over " << scores.size()
    << " examples with l2 <= " << cap << ", drop " << roc_clean.auc - roc_attacked.auc;
  return {roc_clean.auc >= 0.95 && roc_clean.auc - roc_attacked.auc >= 0.2, d.str()};
}

// ---------------------------------------------------------------------------
// 7. Regression attack.

std::vector<AttackResult> regression_attacks(std::size_t count, double c) {
  std::vector<AttackJob> jobs;
  for (std::size_t i = 0; i < count && i < corpus().test.size(); ++i) {
    const auto& s = corpus().test[i];
    jobs.push_back({s.source_id, s.image, MaximizeResidual{s.scaled_angle}});
  }
  return run_attacks(regressor().model, jobs, regression_attack_config(c), 1);
}

Verdict criterion_regression() {
  const auto& t = regressor();
  const double mse = evaluate_regressor(t.model, std::span<const Sample>(corpus().test)).mse;
  const auto start = Clock::now();

  const auto main_run = regression_attacks(100, 100.0);
  std::vector<double> ratios;
  for (const auto& r : main_run) ratios.push_back(r.mse_ratio());
  const auto above_one = std::count_if(ratios.begin(), ratios.end(), [](double r) { return r > 1; });
  const double fraction = static_cast<double>(above_one) / static_cast<double>(ratios.size());
  const double median = nearest_rank(ratios, 50);

  std::vector<double> means;
  for (const double c : {1.0, 10.0, 100.0}) {
    const auto rs = regression_attacks(50, c);
    double sum = 0;
    std::size_t n = 0;
    for (const auto& r : rs) {
      if (r.clean_mse == 0) continue;
      sum += r.mse_ratio();
      ++n;
    }
    means.push_back(sum / static_cast<double>(n));
  }
  const bool monotone = means[0] <= means[1] && means[1] <= means[2];
  const double secs = seconds_since(start);
  std::ostringstream d;
  d << "regressor test MSE " << mse << "; c=100 on " << ratios.size() << " images: ratio > 1 for " << fraction
    << ", median " << median << "; mean ratio at c=1,10,100: " << means[0] << ", " << means[1] << ", " << means[2]
    << "; attacks " << secs << " s";
  return {mse <= 0.03 && fraction >= 0.90 && median >= 2 && monotone && secs < 1200, d.str()};
}

// ---------------------------------------------------------------------------
// 8. Metric oracles.

std::vector<double> random_values(Gen& gen, std::size_t n) {
  std::vector<double> v(n);
  const bool coarse = gen.coin();  // coarse grids force duplicates
  for (auto& x : v) x = coarse ? static_cast<double>(gen.index(0, 10)) * 0.5 : gen.uniform(0, 10);
  return v;
}

Verdict criterion_metric_oracles() {
  Gen gen(808);
  std::size_t ratio_mismatch = 0, cdf_mismatch = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = gen.index(1, 60);
    const auto ratios = random_values(gen, n);
    const auto l2 = random_values(gen, n);
    std::vector<double> pct;
    std::vector<int> ipct;
    for (std::size_t k = gen.index(1, 6); k > 0; --k) {
      ipct.push_back(static_cast<int>(gen.index(1, 100)));
      pct.push_back(ipct.back());
    }
    const auto table = ratio_percentiles(ratios, l2, pct);
    bool ok = table.rows.size() == pct.size() && table.max_ratio == *std::max_element(ratios.begin(), ratios.end());
    for (std::size_t i = 0; ok && i < pct.size(); ++i) {
      ok = table.rows[i].percentile == pct[i] && table.rows[i].mse_ratio == testing::sorted_rank(ratios, ipct[i]) &&
           table.rows[i].l2 == testing::sorted_rank(l2, ipct[i]);
    }
    if (!ok) ++ratio_mismatch;

    const auto values = random_values(gen, n);
    const auto cdf = mse_cdf(values);
    auto sorted = values;
    std::sort(sorted.begin(), sorted.end());
    std::vector<CdfPoint> expect;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (i + 1 < sorted.size() && sorted[i + 1] == sorted[i]) continue;
      expect.push_back({sorted[i], static_cast<double>(i + 1) / static_cast<double>(n)});
    }
    ok = cdf.max == sorted.back() && cdf.points.size() == expect.size();
    for (std::size_t i = 0; ok && i < expect.size(); ++i)
      ok = cdf.points[i].mse == expect[i].mse && cdf.points[i].fraction == expect[i].fraction;
    if (!ok) ++cdf_mismatch;
  }

  std::vector<ClassScores> scores(10000);
  std::vector<Direction> labels(10000);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    for (auto& s : scores[i]) s = gen.uniform(0, 1);
    labels[i] = static_cast<Direction>(gen.index(0, 2));
  }
  const double auc = micro_roc(scores, labels).auc;
  std::ostringstream d;
  d << ratio_mismatch << " ratio table mismatches, " << cdf_mismatch << " cdf mismatches over 1000 inputs; random AUC "
    << auc << " at n=10000";
  return {ratio_mismatch == 0 && cdf_mismatch == 0 && auc >= 0.45 && auc <= 0.55, d.str()};
}

// ---------------------------------------------------------------------------
// 9. Determinism of the command-line pipeline.

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "evasion");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != kExitOk) std::cerr << err.str();
  return code;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Drops the trailing wall_time_ms column of every row.
std::string without_wall_time(const std::string& csv) {
  std::istringstream in(csv);
  std::string out;
  for (std::string line; std::getline(in, line);) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

struct PipelineOutput {
  std::uint64_t checksum = 0;
  std::string train_csv, attack_csv;
  std::map<std::string, std::string> adversarial;
};

std::optional<PipelineOutput> run_pipeline(const fs::path& root) {
  const std::string data = (root / "data").string(), model = (root / "model").string(),
                    attack = (root / "attack").string();
  const std::vector<std::string> common{"--seed", "21", "--workers", "1", "--set", "data.resolution=16"};
  auto with = [&](std::vector<std::string> a) {
    a.insert(a.end(), common.begin(), common.end());
    return a;
  };
  if (cli(with({"synth", "--out", data, "--set", "data.count=60"})) != kExitOk) return std::nullopt;
  if (cli(with({"train", "--out", model, "--set", "data.dir=" + data, "--set", "train.epochs=3", "--set",
                "train.batch_size=16"})) != kExitOk)
    return std::nullopt;
  if (cli(with({"attack", "--out", attack, "--set", "data.dir=" + data, "--set",
                "model.weights=" + (root / "model" / "model.evw").string(), "--set", "attack.images=6", "--set",
                "attack.max_iterations=100", "--set", "attack.steps=4"})) != kExitOk)
    return std::nullopt;
  PipelineOutput out;
  out.checksum = weight_file_checksum(root / "model" / "model.evw");
  out.train_csv = read_text(root / "model" / "train_report.csv");
  out.attack_csv = without_wall_time(read_text(root / "attack" / "attack_results.csv"));
  for (const auto& e : fs::directory_iterator(root / "attack" / "adversarial"))
    out.adversarial[e.path().filename().string()] = read_text(e.path());
  return out;
}

Verdict criterion_determinism() {
  const auto a = run_pipeline(testing::scratch_dir("acceptance_run_a"));
  const auto b = run_pipeline(testing::scratch_dir("acceptance_run_b"));
  if (!a || !b) return {false, "pipeline command failed"};
  const bool same_weights = a->checksum == b->checksum;
  const bool same_train = a->train_csv == b->train_csv;
  const bool same_attack = a->attack_csv == b->attack_csv;
  const bool same_images = a->adversarial == b->adversarial;
  std::ostringstream d;
  d << "checksums " << (same_weights ? "equal" : "differ") << ", train report " << (same_train ? "equal" : "differ")
    << ", attack results " << (same_attack ? "equal" : "differ") << ", " << a->adversarial.size()
    << " adversarial images " << (same_images ? "equal" : "differ");
  return {same_weights && same_train && same_attack && same_images && !a->adversarial.empty(), d.str()};
}

// ---------------------------------------------------------------------------
// 10. Round trips.

template <typename T>
bool bit_equal(const Model<T>& a, const Model<T>& b) {
  if (a.parameters().size() != b.parameters().size()) return false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const auto& x = a.parameters()[i];
    const auto& y = b.parameters()[i];
    if (x.name != y.name || x.value.shape() != y.value.shape()) return false;
    if (std::memcmp(x.value.data().data(), y.value.data().data(), x.value.size() * sizeof(T)) != 0) return false;
  }
  return true;
}

Verdict criterion_round_trips() {
  const auto dir = testing::scratch_dir("acceptance_round_trip");
  std::size_t weight_failures = 0, models = 0;
  auto check_model = [&](const Model<float>& m, const std::string& name) {
    const auto path = dir / (name + ".evw");
    save_weights(m, path);
    const auto back = load_weights<float>(path);
    ++models;
    if (!bit_equal(m, back)) ++weight_failures;
  };
  check_model(classifier().model, "classifier");
  check_model(regressor().model, "regressor");
  check_model(build_nvidia(Head::classification, kRes, 5), "nvidia_classifier");
  check_model(build_nvidia(Head::regression, kRes, 6), "nvidia_regressor");
  {
    const Model<double> m = build_epoch(Head::classification, {16, 16}, 9).cast<double>();
    save_weights(m, dir / "double.evw");
    ++models;
    if (!bit_equal(m, load_weights<double>(dir / "double.evw"))) ++weight_failures;
  }

  const auto& a = class_attacks();
  std::size_t images = 0, violations = 0;
  double worst_gap = 0;
  for (std::size_t i = 0; i < a.results.size(); ++i) {
    const auto& r = a.results[i];
    const auto path = dir / ("adv_" + std::to_string(i) + ".ppm");
    write_ppm(path, to_rgb(r.adversarial));
    const Tensor<float> back = to_tensor(read_ppm(path));
    const auto& original = a.sources[i]->image;
    const double gap = std::abs(l2_distance(back, original) - l2_distance(r.adversarial, original));
    const double bound = quantization_bound(original.size());
    worst_gap = std::max(worst_gap, gap / bound);
    if (gap > bound) ++violations;
    ++images;
  }
  std::ostringstream d;
  d << weight_failures << "/" << models << " weight files not bit-exact; " << violations << "/" << images
    << " PPM images outside the quantization bound (worst " << worst_gap << " of bound)";
  return {weight_failures == 0 && violations == 0 && images > 0, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient suite", criterion_gradients},
      {"convolution oracle", criterion_conv_oracle},
      {"clean training", criterion_training},
      {"targeted attack success", criterion_attack_success},
      {"perturbation smallness", criterion_smallness},
      {"AUC degradation", criterion_auc},
      {"regression attack", criterion_regression},
      {"metric oracles", criterion_metric_oracles},
      {"determinism", criterion_determinism},
      {"round trips", criterion_round_trips},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoul(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const std::size_t id = i + 1;
    if (!selected.empty() && !selected.contains(id)) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    if (!v.pass) ++failures;
    std::cout << "criterion " << id << ": " << (v.pass ? "PASS" : "FAIL") << " " << criteria[i].first << " ("
              << v.detail << ")" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
