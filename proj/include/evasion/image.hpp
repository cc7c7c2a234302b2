#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "evasion/tensor.hpp"

namespace evasion {

/// 8-bit interleaved RGB, row-major.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  bool operator==(const RgbImage&) const = default;
};

/// Binary PPM (P6) with maxval 255; header comments are skipped.
RgbImage decode_ppm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_ppm(const RgbImage& image);
RgbImage read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const RgbImage& image);

/// Decodes by content. Only P6 is supported.
RgbImage read_image(const std::filesystem::path& path);

/// H x W x 3 tensor with values byte / 255.
Tensor<float> to_tensor(const RgbImage& image);
/// Rounds v * 255 after clamping to [0, 1].
RgbImage to_rgb(const Tensor<float>& image);

/// Largest L2 change that 8-bit rounding can introduce to a d-element image
/// in [0, 1]: sqrt(d) / 510.
double quantization_bound(std::size_t elements);

/// Bilinear resize of an H x W x C tensor with half-pixel centers:
/// source = (dest + 0.5) * in / out - 0.5, clamped to the valid range.
Tensor<float> resize_bilinear(const Tensor<float>& image, std::size_t out_height, std::size_t out_width);

}  // namespace evasion
