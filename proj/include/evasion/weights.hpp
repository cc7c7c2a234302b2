#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "evasion/model.hpp"

namespace evasion {

// Weight file layout (little-endian):
//   "EVFW" | u16 version = 1 | u32 tensor count
//   per tensor: u16 name length | UTF-8 name | u8 dtype (0 = f32, 1 = f64) |
//               u8 ndim | u32 dims[ndim] | raw data
//   u64 checksum = sum of every preceding byte mod 2^64
//
// The first tensor, "__model__", is f64 [architecture, head, height, width].

inline constexpr std::uint16_t kWeightFileVersion = 1;

struct StoredTensor {
  std::string name;
  std::variant<Tensor<float>, Tensor<double>> value;
};

std::vector<std::uint8_t> encode_weight_file(const std::vector<StoredTensor>& tensors);
std::vector<StoredTensor> decode_weight_file(const std::vector<std::uint8_t>& bytes);

template <typename T>
void save_weights(const Model<T>& model, const std::filesystem::path& path);

/// Rebuilds the architecture recorded in the file and fills its parameters.
/// Stored dtypes are converted to T.
template <typename T = float>
Model<T> load_weights(const std::filesystem::path& path);

/// Checksum field of an existing weight file.
std::uint64_t weight_file_checksum(const std::filesystem::path& path);

}  // namespace evasion
