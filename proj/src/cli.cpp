#include "evasion/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "evasion/attack.hpp"
#include "evasion/config.hpp"
#include "evasion/data.hpp"
#include "evasion/errors.hpp"
#include "evasion/evaluation.hpp"
#include "evasion/trainer.hpp"
#include "evasion/weights.hpp"

namespace evasion {

namespace {

namespace fs = std::filesystem;

struct AttackRow {
  std::string source_id;
  std::string original;  // class name or y
  std::string target;    // class name, "fixed" or "search"
  bool success = false;
  double l2 = 0;
  double pre_value = 0;
  double post_value = 0;
};

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string f; std::getline(ss, f, ',');) out.push_back(f);
  return out;
}

double parse_number(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(where + ": expected a number, got \"" + s + "\"");
  }
}

std::vector<AttackRow> read_attack_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open attack results " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != attack_csv_header()) {
    throw FormatError(path.string() + ":1: unexpected header");
  }
  std::vector<AttackRow> rows;
  for (std::size_t n = 2; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    const auto f = split(line);
    const std::string where = path.string() + ":" + std::to_string(n);
    if (f.size() != 10) throw FormatError(where + ": expected 10 fields");
    AttackRow r{f[0], f[1], f[2], f[3] == "1", parse_number(f[4], where), 0, 0};
    if (f[2] == "fixed" || f[2] == "search") {
      r.pre_value = parse_number(f[7], where);
      r.post_value = parse_number(f[8], where);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string adversarial_name(const std::string& source_id, const std::string& target) {
  return source_id + "_" + (target == "fixed" || target == "search" ? std::string("adv") : target) + ".ppm";
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

std::vector<Sample> load_dataset(const RunConfig& cfg) {
  const Resolution res{cfg.data.resolution, cfg.data.resolution};
  if (!cfg.data.dir.empty()) {
    if (!fs::exists(fs::path(cfg.data.dir) / "manifest.csv")) {
      throw ConfigError("dataset directory " + cfg.data.dir + " has no manifest.csv");
    }
    auto samples = read_dataset(cfg.data.dir);
    const Shape expected{res.height, res.width, 3};
    for (auto& s : samples) {
      if (s.image.shape() != expected) s.image = resize_bilinear(s.image, res.height, res.width);
    }
    return samples;
  }
  if (!cfg.data.log.empty()) {
    if (!fs::exists(cfg.data.log)) throw ConfigError("steering log " + cfg.data.log + " does not exist");
    auto log = load_steering_log(cfg.data.log, cfg.data.image_dir, PreprocessOptions{kCropRows, res});
    return std::move(log.samples);
  }
  throw ConfigError("no dataset configured: set data.dir or data.log");
}

Model<float> load_model(const RunConfig& cfg) {
  if (cfg.model.weights.empty()) throw ConfigError("model.weights is not set");
  if (!fs::exists(cfg.model.weights)) throw ConfigError("weight file " + cfg.model.weights + " does not exist");
  return load_weights<float>(cfg.model.weights);
}

int cmd_synth(const RunConfig& cfg, std::ostream& out) {
  SyntheticOptions opts;
  opts.count = cfg.data.count;
  opts.resolution = {cfg.data.resolution, cfg.data.resolution};
  opts.seed = cfg.seed;
  opts.class_mix = cfg.data.class_mix;
  const auto samples = generate_synthetic(opts);
  write_dataset(cfg.out, samples);
  const auto s = summarize(samples);
  out << "wrote " << s.count << " samples to " << cfg.out << "\n"
      << "angle mean " << s.angle_mean << " stddev " << s.angle_stddev << " min " << s.angle_min << " max "
      << s.angle_max << "\n"
      << "proportions left " << s.proportions[0] << " straight " << s.proportions[1] << " right " << s.proportions[2]
      << "\n";
  return kExitOk;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  const auto samples = load_dataset(cfg);
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  tc.loss = loss_for(cfg.model.head);
  const Resolution res{cfg.data.resolution, cfg.data.resolution};

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::floor(cfg.data.holdout * static_cast<double>(samples.size())));
  std::vector<Sample> val, train_set;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_val ? val : train_set).push_back(samples[order[i]]);
  if (train_set.empty()) throw ConfigError("holdout leaves no training samples");

  fs::create_directories(cfg.out);
  if (cfg.folds >= 2) {
    const auto cv = cross_validate(
        [&](std::uint64_t seed) { return build_model(cfg.model.arch, cfg.model.head, res, seed); }, samples, cfg.folds,
        tc);
    std::string csv = "fold,metric\n";
    for (const auto& r : cv.reports) csv += std::to_string(*r.fold) + "," + std::to_string(r.final_metric) + "\n";
    write_text(fs::path(cfg.out) / "cross_validation.csv", csv);
    out << "cross-validation mean " << cv.mean << " stddev " << cv.stddev << "\n";
  }

  Model<float> model = build_model(cfg.model.arch, cfg.model.head, res, cfg.seed);
  const TrainReport report = train(model, train_set, tc, val);
  const fs::path weights = fs::path(cfg.out) / "model.evw";
  save_weights(model, weights);
  write_text(fs::path(cfg.out) / "train_report.csv", report.to_csv());
  out << (cfg.model.head == Head::classification ? "accuracy " : "mse ") << report.final_metric << " ("
      << (val.empty() ? "training set" : "holdout") << ")\n"
      << "weights " << weights.string() << " checksum " << weight_file_checksum(weights) << "\n";
  return kExitOk;
}

int cmd_attack(const RunConfig& cfg, std::ostream& out) {
  const Model<float> model = load_model(cfg);
  const bool classify = cfg.attack.mode == AttackMode::targeted_class;
  if (classify != (model.head() == Head::classification)) {
    throw ConfigError("attack mode " + std::string(to_string(cfg.attack.mode)) + " does not match a " +
                      std::string(to_string(model.head())) + " model");
  }
  const auto samples = load_dataset(cfg);
  std::vector<AttackJob> jobs;
  std::size_t images = 0;
  for (const auto& s : samples) {
    if (images == cfg.attack_images) break;
    if (classify) {
      if (model.predict_direction(s.image).direction != s.label) continue;
      for (std::size_t t = 0; t < kNumDirections; ++t) {
        if (t != static_cast<std::size_t>(s.label)) jobs.push_back({s.source_id, s.image, TargetClass{Direction(t)}});
      }
    } else {
      jobs.push_back({s.source_id, s.image, MaximizeResidual{s.scaled_angle}});
    }
    ++images;
  }
  if (jobs.empty()) throw std::runtime_error("no eligible images to attack");

  const auto results = run_attacks(model, jobs, cfg.attack, cfg.workers);
  const fs::path dir(cfg.out);
  fs::create_directories(dir / "adversarial");
  fs::create_directories(dir / "original");
  std::string csv = attack_csv_header() + "\n";
  std::size_t successes = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    const std::string row = attack_csv_row(jobs[i].source_id, r);
    csv += row + "\n";
    const std::string target = split(row)[2];
    write_ppm(dir / "adversarial" / adversarial_name(jobs[i].source_id, target), to_rgb(r.adversarial));
    write_ppm(dir / "original" / (jobs[i].source_id + ".ppm"), to_rgb(jobs[i].image));
    successes += r.success;
  }
  write_text(dir / "attack_results.csv", csv);
  out << "attacked " << images << " images, " << results.size() << " attacks, " << successes << " successful\n";
  return kExitOk;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  const Model<float> model = load_model(cfg);
  const auto samples = load_dataset(cfg);
  std::map<std::string, const Sample*> by_id;
  for (const auto& s : samples) by_id[s.source_id] = &s;

  EvalReport report;
  report.n_images = samples.size();
  const bool classify = model.head() == Head::classification;
  if (classify) {
    const auto clean = evaluate_classifier(model, samples);
    report.roc_clean = micro_roc(clean.scores, clean.labels);
    out << "clean accuracy " << clean.accuracy << " auc " << report.roc_clean->auc << "\n";
  } else {
    const auto clean = evaluate_regressor(model, samples);
    report.mse_cdf_clean = mse_cdf(clean.squared_residuals);
    out << "clean mse " << clean.mse << "\n";
  }

  if (!cfg.eval.attack_dir.empty()) {
    const fs::path dir(cfg.eval.attack_dir);
    const auto rows = read_attack_csv(dir / "attack_results.csv");
    if (rows.empty()) throw FormatError("attack results are empty");
    std::vector<AttackResult> results;
    for (const auto& row : rows) {
      AttackResult r;
      r.success = row.success;
      r.l2_norm = row.l2;
      if (!classify) {
        r.mode = AttackMode::regression;
        r.y = parse_number(row.original, "attack results");
        r.clean_mse = (row.pre_value - r.y) * (row.pre_value - r.y);
        r.adversarial_mse = (row.post_value - r.y) * (row.post_value - r.y);
      }
      results.push_back(r);
    }
    const double successes = static_cast<double>(std::count_if(rows.begin(), rows.end(), [](const AttackRow& r) { return r.success; }));
    report.success_rate = successes / static_cast<double>(rows.size());

    if (classify) {
      std::vector<double> eps = cfg.eval.epsilons;
      if (eps.empty()) {
        double top = 0;
        for (const auto& r : rows) top = std::max(top, r.l2);
        for (int i = 0; i <= 20; ++i) eps.push_back(top * i / 20.0);
      }
      report.success_curve = success_vs_distance(results, eps);

      std::vector<double> norms;
      for (const auto& r : rows) {
        if (r.success) norms.push_back(r.l2);
      }
      double cap = cfg.eval.cap;
      if (cap == 0 && !norms.empty()) cap = nearest_rank(norms, 50);
      std::vector<ClassScores> scores;
      std::vector<Direction> labels;
      for (const auto& r : rows) {
        if (r.l2 > cap) continue;
        const auto it = by_id.find(r.source_id);
        if (it == by_id.end()) throw FormatError("attacked image " + r.source_id + " is not in the dataset");
        const Tensor<float> adv = to_tensor(read_image(dir / "adversarial" / adversarial_name(r.source_id, r.target)));
        const auto p = model.predict_direction(adv).probabilities;
        scores.push_back({p[0], p[1], p[2]});
        labels.push_back(it->second->label);
      }
      if (!scores.empty()) {
        report.roc_attacked = micro_roc(scores, labels);
        out << "attacked auc " << report.roc_attacked->auc << " over " << scores.size() << " examples with l2 <= "
            << cap << "\n";
      }
    } else {
      report.ratios = ratio_percentiles(results);
      std::vector<double> adv;
      for (const auto& r : results) adv.push_back(r.adversarial_mse);
      report.mse_cdf_attacked = mse_cdf(adv);
      out << "max mse ratio " << report.ratios->max_ratio << "\n";
    }
    out << "success rate " << *report.success_rate << "\n";
  }
  write_report(cfg.out, report);
  out << "report written to " << cfg.out << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Train steering CNNs and run L2 evasion attacks against them", "evasion"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::optional<std::size_t> workers;
  bool show_config = false;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "INI configuration file");
  app.add_option("--seed", seed, "Random seed for every stage");
  app.add_option("--out", out_dir, "Output directory");
  app.add_option("--workers", workers, "Concurrent attack workers");
  app.add_flag("--show-config", show_config, "Print the resolved configuration before running");
  app.add_option("--set", overrides, "Override a key, e.g. --set train.epochs=5");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic road-scene dataset");
  auto* train_cmd = app.add_subcommand("train", "Train a model and write its weight file");
  auto* attack = app.add_subcommand("attack", "Attack a trained model");
  auto* eval = app.add_subcommand("eval", "Build the evaluation report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) load_ini(config_path, cfg);
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got \"" + o + "\"");
      cfg.set(o.substr(0, eq), o.substr(eq + 1));
    }
    if (seed) cfg.seed = *seed;
    if (!out_dir.empty()) cfg.out = out_dir;
    if (workers) cfg.workers = *workers;
    if (show_config) out << cfg.to_ini() << "\n";
    cfg.validate();

    if (*synth) return cmd_synth(cfg, out);
    if (*train_cmd) return cmd_train(cfg, out);
    if (*attack) return cmd_attack(cfg, out);
    if (*eval) return cmd_eval(cfg, out);
    return kExitConfig;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace evasion
