#include "evasion/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "evasion/errors.hpp"

namespace evasion {

namespace {

constexpr double kStraightSigma = 0.07;
constexpr double kLeftExcessMean = 0.284;
constexpr double kRightExcessMean = 0.231;
constexpr double kAngleMin = -2.05;
constexpr double kAngleMax = 1.9;
constexpr double kDegreesPerUnit = 30.0;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

bool parse_double(const std::string& s, double& out) {
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc{} && ptr == end && std::isfinite(out);
}

double smoothstep_coverage(double signed_distance) {
  return std::clamp(signed_distance + 0.5, 0.0, 1.0);
}

}  // namespace

double scale_angle(double raw_angle) {
  return raw_angle / kAngleScale;
}

Direction angle_to_label(double scaled_angle) {
  if (scaled_angle > kDirectionThreshold) return Direction::right;
  if (scaled_angle < -kDirectionThreshold) return Direction::left;
  return Direction::straight;
}

Tensor<float> preprocess(const RgbImage& raw, const PreprocessOptions& options) {
  if (raw.height < options.crop_rows) {
    throw ShapeError("image has " + std::to_string(raw.height) + " rows, preprocessing needs at least " +
                     std::to_string(options.crop_rows));
  }
  if (raw.pixels.size() != raw.width * raw.height * 3) throw FormatError("RGB buffer does not match dimensions");
  const std::size_t skip = raw.height - options.crop_rows;
  Tensor<float> cropped({options.crop_rows, raw.width, 3});
  const auto first = raw.pixels.begin() + static_cast<std::ptrdiff_t>(skip * raw.width * 3);
  std::transform(first, raw.pixels.end(), cropped.raw(), [](std::uint8_t b) { return static_cast<float>(b); });
  Tensor<float> out = resize_bilinear(cropped, options.target.height, options.target.width);
  for (float& v : out.data()) v = std::clamp(v / 255.0f, 0.0f, 1.0f);
  return out;
}

SteeringLog load_steering_log(const std::filesystem::path& csv_path, const std::filesystem::path& image_dir,
                              const PreprocessOptions& options) {
  std::ifstream in(csv_path);
  if (!in) throw FormatError("cannot open steering log " + csv_path.string());
  std::string line;
  if (!std::getline(in, line) || trim(line) != "frame,angle") {
    throw FormatError(csv_path.string() + ":1: expected header \"frame,angle\"");
  }
  SteeringLog log;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string row = trim(line);
    if (row.empty()) continue;
    const auto comma = row.find(',');
    const std::string where = csv_path.string() + ":" + std::to_string(line_no);
    if (comma == std::string::npos || row.find(',', comma + 1) != std::string::npos) {
      throw FormatError(where + ": expected two fields, got \"" + row + "\"");
    }
    const std::string frame = trim(row.substr(0, comma));
    double raw_angle = 0;
    if (frame.empty()) throw FormatError(where + ": empty frame name");
    if (!parse_double(trim(row.substr(comma + 1)), raw_angle)) {
      throw FormatError(where + ": angle is not a finite number");
    }
    const auto image_path = image_dir / frame;
    if (!std::filesystem::exists(image_path)) {
      log.missing.push_back(frame);
      continue;
    }
    Sample s;
    s.image = preprocess(read_image(image_path), options);
    s.scaled_angle = scale_angle(raw_angle);
    s.label = angle_to_label(s.scaled_angle);
    s.source_id = std::filesystem::path(frame).stem().string();
    log.samples.push_back(std::move(s));
  }
  if (log.samples.empty()) {
    throw FormatError("steering log " + csv_path.string() + " yields no samples (" + std::to_string(log.missing.size()) +
                      " images missing)");
  }
  return log;
}

void validate_class_mix(const ClassMix& mix) {
  double total = 0;
  for (double p : mix) {
    if (!(p >= 0) || !std::isfinite(p)) throw ConfigError("class_mix entries must be nonnegative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6) throw ConfigError("class_mix must sum to 1, got " + std::to_string(total));
}

double sample_synthetic_angle(Direction cls, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  switch (cls) {
    case Direction::straight: {
      std::normal_distribution<double> normal(0.0, kStraightSigma);
      double a;
      do a = normal(rng);
      while (std::abs(a) > kDirectionThreshold);
      return a;
    }
    case Direction::left: {
      std::exponential_distribution<double> excess(1.0 / kLeftExcessMean);
      return std::max(kAngleMin, -kDirectionThreshold - excess(rng));
    }
    case Direction::right: {
      std::exponential_distribution<double> excess(1.0 / kRightExcessMean);
      return std::min(kAngleMax, kDirectionThreshold + excess(rng));
    }
  }
  return 0.0;
}

Tensor<float> render_road(Resolution resolution, double scaled_angle, std::uint64_t seed) {
  const std::size_t H = resolution.height, W = resolution.width;
  if (H == 0 || W == 0) throw ShapeError("render resolution must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double h = static_cast<double>(H), w = static_cast<double>(W);

  const double horizon = h * (0.30 + 0.06 * (u(rng) - 0.5));
  const double ground = 0.30 + 0.15 * u(rng);
  const double road_gray = 0.16 + 0.08 * u(rng);
  const double brightness = 0.85 + 0.30 * u(rng);
  std::array<double, 6> wave{};
  for (double& v : wave) v = u(rng);

  const double theta = kDegreesPerUnit * scaled_angle * std::numbers::pi / 180.0;
  const double dx = std::sin(theta), dy = -std::cos(theta);  // along the lane, image y grows downward
  const double px = w / 2.0, py = h;
  const double reach = h - horizon;
  const double half_width = 0.30 * w;
  const double line_width = std::max(0.9, w / 48.0);

  Tensor<float> img({H, W, 3});
  std::normal_distribution<double> noise(0.0, 0.02);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double cx = static_cast<double>(x) + 0.5, cy = static_cast<double>(y) + 0.5;
      std::array<double, 3> rgb;
      if (cy < horizon) {
        const double t = cy / horizon;
        rgb = {0.55 + 0.15 * t, 0.65 + 0.1 * t, 0.85 - 0.05 * t};
      } else {
        const double tex = 0.03 * std::sin(cx * (0.3 + wave[0]) + 6.0 * wave[1]) +
                           0.03 * std::sin(cy * (0.5 + wave[2]) + 6.0 * wave[3]) +
                           0.02 * std::sin((cx + cy) * (0.2 + wave[4]) + 6.0 * wave[5]);
        const double g = ground + tex;
        rgb = {g * 1.05, g, g * 0.85};

        const double rx = cx - px, ry = cy - py;
        const double along = rx * dx + ry * dy;
        const double across = rx * std::cos(theta) + ry * std::sin(theta);
        if (along > -line_width) {
          const double depth = std::clamp(along / reach, 0.0, 1.0);
          const double hw = half_width * (1.0 - 0.7 * depth);
          const double road = smoothstep_coverage(hw - std::abs(across));
          for (double& c : rgb) c = c * (1 - road) + road_gray * road;
          const double edge = smoothstep_coverage(line_width * 0.5 - std::abs(std::abs(across) - hw));
          for (double& c : rgb) c = c * (1 - edge) + 0.85 * edge;
          const double lane = smoothstep_coverage(line_width - std::abs(across));
          rgb = {rgb[0] * (1 - lane) + 0.98 * lane, rgb[1] * (1 - lane) + 0.92 * lane, rgb[2] * (1 - lane) + 0.45 * lane};
        }
      }
      for (std::size_t c = 0; c < 3; ++c) {
        img[(y * W + x) * 3 + c] = static_cast<float>(std::clamp(rgb[c] * brightness + noise(rng), 0.0, 1.0));
      }
    }
  }
  return img;
}

std::vector<Sample> generate_synthetic(const SyntheticOptions& options) {
  if (options.count == 0) throw ConfigError("synthetic count must be at least 1");
  validate_class_mix(options.class_mix);
  std::vector<Sample> out(options.count);
  for (std::size_t i = 0; i < options.count; ++i) {
    const std::uint64_t base = splitmix(options.seed ^ splitmix(i + 1));
    std::mt19937_64 rng(base);
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    Direction cls = Direction::right;
    if (u < options.class_mix[0]) {
      cls = Direction::left;
    } else if (u < options.class_mix[0] + options.class_mix[1]) {
      cls = Direction::straight;
    }
    Sample& s = out[i];
    s.scaled_angle = sample_synthetic_angle(cls, splitmix(base + 1));
    s.label = angle_to_label(s.scaled_angle);
    s.image = render_road(options.resolution, s.scaled_angle, splitmix(base + 2));
    char id[32];
    std::snprintf(id, sizeof id, "syn%06zu", i);
    s.source_id = id;
  }
  return out;
}

DatasetSummary summarize(std::span<const Sample> samples) {
  if (samples.empty()) throw std::invalid_argument("cannot summarize an empty dataset");
  DatasetSummary s;
  s.count = samples.size();
  s.angle_min = s.angle_max = samples.front().scaled_angle;
  double sum = 0;
  std::array<std::size_t, kNumDirections> counts{};
  for (const auto& x : samples) {
    s.angle_min = std::min(s.angle_min, x.scaled_angle);
    s.angle_max = std::max(s.angle_max, x.scaled_angle);
    sum += x.scaled_angle;
    ++counts[static_cast<std::size_t>(x.label)];
  }
  const double n = static_cast<double>(s.count);
  s.angle_mean = sum / n;
  double ss = 0;
  for (const auto& x : samples) ss += (x.scaled_angle - s.angle_mean) * (x.scaled_angle - s.angle_mean);
  s.angle_stddev = std::sqrt(ss / n);
  for (std::size_t c = 0; c < kNumDirections; ++c) s.proportions[c] = static_cast<double>(counts[c]) / n;
  return s;
}

std::vector<Fold> kfold_split(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("k-fold split needs k >= 2, got " + std::to_string(k));
  if (k > n) throw std::invalid_argument("k-fold split with k=" + std::to_string(k) + " exceeds dataset size " + std::to_string(n));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<Fold> folds(k);
  std::size_t start = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = n / k + (f < n % k ? 1 : 0);
    folds[f].validation.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                               order.begin() + static_cast<std::ptrdiff_t>(start + size));
    folds[f].train.reserve(n - size);
    folds[f].train.insert(folds[f].train.end(), order.begin(), order.begin() + static_cast<std::ptrdiff_t>(start));
    folds[f].train.insert(folds[f].train.end(), order.begin() + static_cast<std::ptrdiff_t>(start + size), order.end());
    start += size;
  }
  return folds;
}

void write_dataset(const std::filesystem::path& dir, std::span<const Sample> samples) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv", std::ios::trunc);
  if (!manifest) throw FormatError("cannot write manifest in " + dir.string());
  manifest << "source_id,scaled_angle,label\n";
  char angle[64];
  for (const auto& s : samples) {
    write_ppm(dir / (s.source_id + ".ppm"), to_rgb(s.image));
    std::snprintf(angle, sizeof angle, "%.17g", s.scaled_angle);
    manifest << s.source_id << ',' << angle << ',' << to_string(s.label) << '\n';
  }
}

std::vector<Sample> read_dataset(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.csv";
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(in, line) || trim(line) != "source_id,scaled_angle,label") {
    throw FormatError(path.string() + ":1: expected header \"source_id,scaled_angle,label\"");
  }
  std::vector<Sample> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string row = trim(line);
    if (row.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(row);
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(trim(f));
    const std::string where = path.string() + ":" + std::to_string(line_no);
    Sample s;
    if (fields.size() != 3 || fields[0].empty() || !parse_double(fields[1], s.scaled_angle)) {
      throw FormatError(where + ": malformed manifest row");
    }
    const auto label = parse_direction(fields[2]);
    if (!label) throw FormatError(where + ": unknown label " + fields[2]);
    s.label = *label;
    if (s.label != angle_to_label(s.scaled_angle)) throw FormatError(where + ": label disagrees with angle");
    s.source_id = fields[0];
    s.image = to_tensor(read_image(dir / (s.source_id + ".ppm")));
    if (!out.empty() && s.image.shape() != out.front().image.shape()) {
      throw FormatError(where + ": image " + s.source_id + " has shape " + to_string(s.image.shape()) + ", expected " +
                        to_string(out.front().image.shape()));
    }
    out.push_back(std::move(s));
  }
  if (out.empty()) throw FormatError("manifest " + path.string() + " lists no samples");
  return out;
}

Tensor<float> stack_images(std::span<const Sample> samples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ShapeError("cannot stack zero images");
  const Shape& shape = samples[indices.front()].image.shape();
  const std::size_t per = samples[indices.front()].image.size();
  Shape batch{indices.size()};
  batch.insert(batch.end(), shape.begin(), shape.end());
  Tensor<float> out(batch);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& img = samples[indices[i]].image;
    if (img.shape() != shape) throw ShapeError("cannot stack " + to_string(img.shape()) + " with " + to_string(shape));
    std::copy(img.raw(), img.raw() + per, out.raw() + i * per);
  }
  return out;
}

Tensor<float> stack_images(std::span<const Sample> samples) {
  std::vector<std::size_t> all(samples.size());
  std::iota(all.begin(), all.end(), 0);
  return stack_images(samples, all);
}

}  // namespace evasion
