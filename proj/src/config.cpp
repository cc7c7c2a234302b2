#include "evasion/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

#include "evasion/errors.hpp"

namespace evasion {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string fmt(double v) {
  char buf[40];
  const auto result = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, result.ptr);
}

double to_double(std::string_view key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError(std::string(key) + ": expected a number, got \"" + v + "\"");
  }
  return out;
}

std::uint64_t to_uint(std::string_view key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw ConfigError(std::string(key) + ": expected a nonnegative integer, got \"" + v + "\"");
  }
  return out;
}

bool to_bool(std::string_view key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(std::string(key) + ": expected true or false, got \"" + v + "\"");
}

std::vector<double> to_list(std::string_view key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) {
    const std::string t = trim(item);
    if (t == "inf") {
      out.push_back(std::numeric_limits<double>::infinity());
    } else if (!t.empty()) {
      out.push_back(to_double(key, t));
    }
  }
  return out;
}

std::string list_string(const auto& values) {
  std::string out;
  for (double v : values) {
    if (!out.empty()) out += ", ";
    out += std::isinf(v) ? std::string("inf") : fmt(v);
  }
  return out;
}

struct Key {
  const char* name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      {"run.seed", [](RunConfig& c, const std::string& v) { c.seed = to_uint("run.seed", v); },
       [](const RunConfig& c) { return std::to_string(c.seed); }},
      {"run.out", [](RunConfig& c, const std::string& v) { c.out = v; }, [](const RunConfig& c) { return c.out; }},
      {"run.workers", [](RunConfig& c, const std::string& v) { c.workers = to_uint("run.workers", v); },
       [](const RunConfig& c) { return std::to_string(c.workers); }},

      {"data.dir", [](RunConfig& c, const std::string& v) { c.data.dir = v; }, [](const RunConfig& c) { return c.data.dir; }},
      {"data.log", [](RunConfig& c, const std::string& v) { c.data.log = v; }, [](const RunConfig& c) { return c.data.log; }},
      {"data.image_dir", [](RunConfig& c, const std::string& v) { c.data.image_dir = v; },
       [](const RunConfig& c) { return c.data.image_dir; }},
      {"data.count", [](RunConfig& c, const std::string& v) { c.data.count = to_uint("data.count", v); },
       [](const RunConfig& c) { return std::to_string(c.data.count); }},
      {"data.resolution", [](RunConfig& c, const std::string& v) { c.data.resolution = to_uint("data.resolution", v); },
       [](const RunConfig& c) { return std::to_string(c.data.resolution); }},
      {"data.class_mix",
       [](RunConfig& c, const std::string& v) {
         const auto mix = to_list("data.class_mix", v);
         if (mix.size() != kNumDirections) throw ConfigError("data.class_mix: expected three values (left, straight, right)");
         for (std::size_t i = 0; i < kNumDirections; ++i) c.data.class_mix[i] = mix[i];
       },
       [](const RunConfig& c) { return list_string(c.data.class_mix); }},
      {"data.holdout", [](RunConfig& c, const std::string& v) { c.data.holdout = to_double("data.holdout", v); },
       [](const RunConfig& c) { return fmt(c.data.holdout); }},

      {"model.arch",
       [](RunConfig& c, const std::string& v) {
         const auto a = parse_architecture(v);
         if (!a) throw ConfigError("model.arch: expected epoch or nvidia, got \"" + v + "\"");
         c.model.arch = *a;
       },
       [](const RunConfig& c) { return std::string(to_string(c.model.arch)); }},
      {"model.head",
       [](RunConfig& c, const std::string& v) {
         const auto h = parse_head(v);
         if (!h) throw ConfigError("model.head: expected classify or regress, got \"" + v + "\"");
         c.model.head = *h;
       },
       [](const RunConfig& c) { return std::string(to_string(c.model.head)); }},
      {"model.weights", [](RunConfig& c, const std::string& v) { c.model.weights = v; },
       [](const RunConfig& c) { return c.model.weights; }},

      {"train.lr", [](RunConfig& c, const std::string& v) { c.train.learning_rate = to_double("train.lr", v); },
       [](const RunConfig& c) { return fmt(c.train.learning_rate); }},
      {"train.momentum", [](RunConfig& c, const std::string& v) { c.train.momentum = to_double("train.momentum", v); },
       [](const RunConfig& c) { return fmt(c.train.momentum); }},
      {"train.batch_size", [](RunConfig& c, const std::string& v) { c.train.batch_size = to_uint("train.batch_size", v); },
       [](const RunConfig& c) { return std::to_string(c.train.batch_size); }},
      {"train.epochs", [](RunConfig& c, const std::string& v) { c.train.epochs = to_uint("train.epochs", v); },
       [](const RunConfig& c) { return std::to_string(c.train.epochs); }},
      {"train.folds", [](RunConfig& c, const std::string& v) { c.folds = to_uint("train.folds", v); },
       [](const RunConfig& c) { return std::to_string(c.folds); }},

      {"attack.mode",
       [](RunConfig& c, const std::string& v) {
         const auto m = parse_attack_mode(v);
         if (!m) throw ConfigError("attack.mode: expected targeted_class or regression, got \"" + v + "\"");
         c.attack.mode = *m;
       },
       [](const RunConfig& c) { return std::string(to_string(c.attack.mode)); }},
      {"attack.c_initial", [](RunConfig& c, const std::string& v) { c.attack.c_initial = to_double("attack.c_initial", v); },
       [](const RunConfig& c) { return fmt(c.attack.c_initial); }},
      {"attack.steps", [](RunConfig& c, const std::string& v) { c.attack.binary_search_steps = to_uint("attack.steps", v); },
       [](const RunConfig& c) { return std::to_string(c.attack.binary_search_steps); }},
      {"attack.fixed_c", [](RunConfig& c, const std::string& v) { c.attack.fixed_c = to_double("attack.fixed_c", v); },
       [](const RunConfig& c) { return fmt(c.attack.fixed_c); }},
      {"attack.max_iterations",
       [](RunConfig& c, const std::string& v) { c.attack.max_iterations = to_uint("attack.max_iterations", v); },
       [](const RunConfig& c) { return std::to_string(c.attack.max_iterations); }},
      {"attack.step_size", [](RunConfig& c, const std::string& v) { c.attack.step_size = to_double("attack.step_size", v); },
       [](const RunConfig& c) { return fmt(c.attack.step_size); }},
      {"attack.abort_early", [](RunConfig& c, const std::string& v) { c.attack.abort_early = to_bool("attack.abort_early", v); },
       [](const RunConfig& c) { return std::string(c.attack.abort_early ? "true" : "false"); }},
      {"attack.abort_window",
       [](RunConfig& c, const std::string& v) { c.attack.abort_window = to_uint("attack.abort_window", v); },
       [](const RunConfig& c) { return std::to_string(c.attack.abort_window); }},
      {"attack.tau", [](RunConfig& c, const std::string& v) { c.attack.tau = to_double("attack.tau", v); },
       [](const RunConfig& c) { return fmt(c.attack.tau); }},
      {"attack.search", [](RunConfig& c, const std::string& v) { c.attack.regression_search = to_bool("attack.search", v); },
       [](const RunConfig& c) { return std::string(c.attack.regression_search ? "true" : "false"); }},
      {"attack.images", [](RunConfig& c, const std::string& v) { c.attack_images = to_uint("attack.images", v); },
       [](const RunConfig& c) { return std::to_string(c.attack_images); }},

      {"eval.attack_dir", [](RunConfig& c, const std::string& v) { c.eval.attack_dir = v; },
       [](const RunConfig& c) { return c.eval.attack_dir; }},
      {"eval.epsilons", [](RunConfig& c, const std::string& v) { c.eval.epsilons = to_list("eval.epsilons", v); },
       [](const RunConfig& c) { return list_string(c.eval.epsilons); }},
      {"eval.cap", [](RunConfig& c, const std::string& v) { c.eval.cap = to_double("eval.cap", v); },
       [](const RunConfig& c) { return fmt(c.eval.cap); }},
  };
  return table;
}

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
  for (const auto& k : keys()) {
    if (key == k.name) {
      k.set(*this, trim(value));
      return;
    }
  }
  throw ConfigError("unknown configuration key \"" + std::string(key) + "\"");
}

void RunConfig::validate() const {
  validate_class_mix(data.class_mix);
  if (data.count == 0) throw ConfigError("data.count must be at least 1");
  if (data.resolution == 0) throw ConfigError("data.resolution must be positive");
  if (!(data.holdout >= 0 && data.holdout < 1)) throw ConfigError("data.holdout must lie in [0, 1)");
  if (workers == 0) throw ConfigError("run.workers must be at least 1");
  if (folds == 1) throw ConfigError("train.folds must be 0 or at least 2");
  if (eval.cap < 0) throw ConfigError("eval.cap must be >= 0");
  train.validate();
  attack.validate();
}

std::string RunConfig::to_ini() const {
  std::string out;
  std::string section;
  for (const auto& k : keys()) {
    const std::string_view name = k.name;
    const auto dot = name.find('.');
    const std::string sec(name.substr(0, dot));
    if (sec != section) {
      out += (section.empty() ? "[" : "\n[") + sec + "]\n";
      section = sec;
    }
    out += std::string(name.substr(dot + 1)) + " = " + k.get(*this) + "\n";
  }
  return out;
}

void parse_ini(std::string_view text, RunConfig& config) {
  std::string section;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = std::min(text.find('\n', start), text.size());
    std::string line(text.substr(start, end - start));
    start = end + 1;
    ++line_no;
    if (const auto c = line.find_first_of("#;"); c != std::string::npos) line.erase(c);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    if (section.empty()) throw ConfigError(where + "key outside of a section");
    try {
      config.set(section + "." + trim(std::string_view(line).substr(0, eq)), std::string_view(line).substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
}

void load_ini(const std::filesystem::path& path, RunConfig& config) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    parse_ini(ss.str(), config);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace evasion
