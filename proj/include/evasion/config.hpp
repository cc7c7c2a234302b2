#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "evasion/attack.hpp"
#include "evasion/data.hpp"
#include "evasion/model.hpp"
#include "evasion/trainer.hpp"

namespace evasion {

struct DataSettings {
  std::string dir;        // dataset directory with manifest.csv
  std::string log;        // steering-log CSV, used when dir is empty
  std::string image_dir;  // images referenced by the log
  std::size_t count = 1000;
  std::size_t resolution = 64;
  ClassMix class_mix = kDefaultClassMix;
  double holdout = 0.1;
};

struct ModelSettings {
  Architecture arch = Architecture::epoch;
  Head head = Head::classification;
  std::string weights;
};

struct EvalSettings {
  std::string attack_dir;
  std::vector<double> epsilons;  // empty: evenly spaced up to the largest norm
  double cap = 0;                // attacked-ROC norm cap; 0 selects the median successful norm
};

/// Resolved configuration: defaults, then the INI file, then --set overrides,
/// then the dedicated command-line flags.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "out";
  std::size_t workers = 1;
  DataSettings data;
  ModelSettings model;
  TrainConfig train;
  std::size_t folds = 0;  // cross-validation folds; 0 disables
  AttackConfig attack;
  std::size_t attack_images = 10;
  EvalSettings eval;

  /// Applies one "section.key" assignment. Throws ConfigError for unknown
  /// keys or unparsable values.
  void set(std::string_view key, std::string_view value);
  void validate() const;
  /// Every key in INI form; parse_ini(to_ini()) reproduces the config.
  std::string to_ini() const;
};

/// "[section]" headers and "key = value" lines; '#' and ';' start comments.
/// Errors name the line.
void parse_ini(std::string_view text, RunConfig& config);
void load_ini(const std::filesystem::path& path, RunConfig& config);

}  // namespace evasion
