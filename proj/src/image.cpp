#include "evasion/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "evasion/errors.hpp"

namespace evasion {

namespace {

class HeaderParser {
 public:
  explicit HeaderParser(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* field) {
    skip_space_and_comments();
    std::size_t start = pos_;
    std::size_t value = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > (1u << 24)) throw FormatError(std::string("PPM ") + field + " too large");
      ++pos_;
    }
    if (pos_ == start) throw FormatError(std::string("PPM header missing ") + field);
    return value;
  }

  std::size_t& pos() { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

RgbImage decode_ppm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw FormatError("not a binary PPM (P6) image");
  HeaderParser p(bytes.subspan(2));
  RgbImage img;
  img.width = p.number("width");
  img.height = p.number("height");
  const std::size_t maxval = p.number("maxval");
  if (img.width == 0 || img.height == 0) throw FormatError("PPM has a zero dimension");
  if (maxval != 255) throw FormatError("PPM maxval must be 255, got " + std::to_string(maxval));
  std::size_t offset = 2 + p.pos();
  if (offset >= bytes.size() || !std::isspace(bytes[offset])) throw FormatError("PPM header not terminated");
  ++offset;
  const std::size_t n = img.width * img.height * 3;
  if (bytes.size() - offset < n) throw FormatError("PPM pixel data truncated");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                    bytes.begin() + static_cast<std::ptrdiff_t>(offset + n));
  return img;
}

std::vector<std::uint8_t> encode_ppm(const RgbImage& image) {
  if (image.pixels.size() != image.width * image.height * 3) throw FormatError("RGB buffer does not match dimensions");
  const std::string header = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.pixels.begin(), image.pixels.end());
  return out;
}

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open image " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  try {
    return decode_ppm(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_ppm(const std::filesystem::path& path, const RgbImage& image) {
  const auto bytes = encode_ppm(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write image " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

RgbImage read_image(const std::filesystem::path& path) {
  return read_ppm(path);
}

Tensor<float> to_tensor(const RgbImage& image) {
  Tensor<float> t({image.height, image.width, 3});
  for (std::size_t i = 0; i < image.pixels.size(); ++i) t[i] = static_cast<float>(image.pixels[i]) / 255.0f;
  return t;
}

RgbImage to_rgb(const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw ShapeError("to_rgb expects H x W x 3, got " + to_string(image.shape()));
  RgbImage out{image.dim(1), image.dim(0), std::vector<std::uint8_t>(image.size())};
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double v = std::clamp(static_cast<double>(image[i]), 0.0, 1.0);
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

double quantization_bound(std::size_t elements) {
  return std::sqrt(static_cast<double>(elements)) / 510.0;
}

Tensor<float> resize_bilinear(const Tensor<float>& image, std::size_t out_height, std::size_t out_width) {
  if (image.rank() != 3) throw ShapeError("resize expects H x W x C, got " + to_string(image.shape()));
  if (out_height == 0 || out_width == 0) throw ShapeError("resize target must be positive");
  const std::size_t in_h = image.dim(0), in_w = image.dim(1), c = image.dim(2);

  struct Tap {
    std::size_t lo, hi;
    double frac;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t i = 0; i < out; ++i) {
      double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const auto lo = static_cast<std::size_t>(std::floor(src));
      t[i] = {lo, std::min(lo + 1, in - 1), src - static_cast<double>(lo)};
    }
    return t;
  };
  const auto ys = taps(in_h, out_height);
  const auto xs = taps(in_w, out_width);

  Tensor<float> out({out_height, out_width, c});
  for (std::size_t y = 0; y < out_height; ++y) {
    for (std::size_t x = 0; x < out_width; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        auto px = [&](std::size_t yy, std::size_t xx) {
          return static_cast<double>(image[(yy * in_w + xx) * c + ch]);
        };
        const double top = px(ys[y].lo, xs[x].lo) * (1 - xs[x].frac) + px(ys[y].lo, xs[x].hi) * xs[x].frac;
        const double bottom = px(ys[y].hi, xs[x].lo) * (1 - xs[x].frac) + px(ys[y].hi, xs[x].hi) * xs[x].frac;
        out[(y * out_width + x) * c + ch] = static_cast<float>(top * (1 - ys[y].frac) + bottom * ys[y].frac);
      }
    }
  }
  return out;
}

}  // namespace evasion
