#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "evasion/image.hpp"
#include "evasion/model.hpp"
#include "evasion/tensor.hpp"

namespace evasion {

inline constexpr double kAngleScale = 25.0;
inline constexpr double kDirectionThreshold = 0.15;
inline constexpr std::size_t kCropRows = 280;

struct Sample {
  Tensor<float> image;  // H x W x 3 in [0, 1]
  double scaled_angle = 0.0;
  Direction label = Direction::straight;
  std::string source_id;
};

/// raw / 25. Division keeps 3.75 -> 0.15 exact.
double scale_angle(double raw_angle);

/// Strict threshold: > 0.15 right, < -0.15 left, otherwise straight.
Direction angle_to_label(double scaled_angle);

struct PreprocessOptions {
  std::size_t crop_rows = kCropRows;
  Resolution target{128, 128};
};

/// Keeps the bottom crop_rows rows, resizes bilinearly, scales to [0, 1].
Tensor<float> preprocess(const RgbImage& raw, const PreprocessOptions& options = {});

struct SteeringLog {
  std::vector<Sample> samples;
  std::vector<std::string> missing;  // frames whose image file was absent
};

/// Reads a "frame,angle" CSV. Rows whose image is absent are skipped and
/// listed; malformed rows raise FormatError naming the line.
SteeringLog load_steering_log(const std::filesystem::path& csv_path, const std::filesystem::path& image_dir,
                              const PreprocessOptions& options = {});

using ClassMix = std::array<double, kNumDirections>;  // left, straight, right
inline constexpr ClassMix kDefaultClassMix{0.15, 0.70, 0.15};

/// Throws ConfigError unless the mix is nonnegative and sums to 1.
void validate_class_mix(const ClassMix& mix);

struct SyntheticOptions {
  std::size_t count = 1000;
  Resolution resolution{64, 64};
  std::uint64_t seed = 0;
  ClassMix class_mix = kDefaultClassMix;
};

/// Scaled angle for one draw of the synthetic law. Straight angles follow a
/// normal truncated to [-0.15, 0.15]; turning angles are the threshold plus an
/// exponential excess, truncated to [-2.05, 1.9].
double sample_synthetic_angle(Direction cls, std::uint64_t seed);

/// Road scene whose lane rotates about the bottom center by 30 degrees per
/// unit of scaled angle.
Tensor<float> render_road(Resolution resolution, double scaled_angle, std::uint64_t seed);

/// Sample i depends only on (seed, i, resolution, class_mix).
std::vector<Sample> generate_synthetic(const SyntheticOptions& options);

struct DatasetSummary {
  std::size_t count = 0;
  double angle_min = 0, angle_max = 0, angle_mean = 0, angle_stddev = 0;
  std::array<double, kNumDirections> proportions{};  // left, straight, right
};

/// Population standard deviation. Rejects an empty dataset.
DatasetSummary summarize(std::span<const Sample> samples);

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// Seeded shuffle, then k contiguous validation blocks; the first n mod k
/// blocks are one larger.
std::vector<Fold> kfold_split(std::size_t n, std::size_t k, std::uint64_t seed);

/// Writes <source_id>.ppm per sample and manifest.csv
/// ("source_id,scaled_angle,label").
void write_dataset(const std::filesystem::path& dir, std::span<const Sample> samples);
/// Reads a directory written by write_dataset.
std::vector<Sample> read_dataset(const std::filesystem::path& dir);

/// Stacks images into N x H x W x 3.
Tensor<float> stack_images(std::span<const Sample> samples, std::span<const std::size_t> indices);
Tensor<float> stack_images(std::span<const Sample> samples);

}  // namespace evasion
