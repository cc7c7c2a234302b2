#include "evasion/weights.hpp"

#include <bit>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>

#include "evasion/errors.hpp"

namespace evasion {

namespace {

constexpr char kMagic[4] = {'E', 'V', 'F', 'W'};
constexpr const char* kModelTensor = "__model__";

class Writer {
 public:
  template <typename U>
  void put(U value) {
    using Bits = std::conditional_t<sizeof(U) == 1, std::uint8_t,
                 std::conditional_t<sizeof(U) == 2, std::uint16_t,
                 std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>>>;
    const auto bits = std::bit_cast<Bits>(value);
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }

  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  template <typename U>
  U get(const std::string& field) {
    using Bits = std::conditional_t<sizeof(U) == 1, std::uint8_t,
                 std::conditional_t<sizeof(U) == 2, std::uint16_t,
                 std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>>>;
    need(sizeof(U), field);
    Bits bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<Bits>(static_cast<Bits>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return std::bit_cast<U>(bits);
  }
  std::string get_string(std::size_t n, const std::string& field) {
    need(n, field);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n, const std::string& field) const {
    if (pos_ + n > end_) throw FormatError("weight file truncated while reading " + field);
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint64_t byte_sum(const std::vector<std::uint8_t>& bytes, std::size_t end) {
  return std::accumulate(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(end), std::uint64_t{0},
                         [](std::uint64_t acc, std::uint8_t b) { return acc + b; });
}

template <typename T>
void put_tensor(Writer& w, const std::string& name, const Tensor<T>& t) {
  if (name.size() > 0xFFFF) throw std::invalid_argument("tensor name too long: " + name);
  w.put(static_cast<std::uint16_t>(name.size()));
  w.put_bytes(name.data(), name.size());
  w.put(static_cast<std::uint8_t>(std::is_same_v<T, float> ? 0 : 1));
  w.put(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) w.put(static_cast<std::uint32_t>(d));
  for (T v : t.data()) w.put(v);
}

std::uint64_t stored_checksum(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[bytes.size() - 8 + i]) << (8 * i);
  return v;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open weight file " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::vector<std::uint8_t> encode_weight_file(const std::vector<StoredTensor>& tensors) {
  Writer w;
  w.put_bytes(kMagic, 4);
  w.put(kWeightFileVersion);
  w.put(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    std::visit([&](const auto& value) { put_tensor(w, t.name, value); }, t.value);
  }
  w.put(byte_sum(w.bytes, w.bytes.size()));
  return std::move(w.bytes);
}

std::vector<StoredTensor> decode_weight_file(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 + 2 + 4 + 8) throw FormatError("weight file truncated: " + std::to_string(bytes.size()) + " bytes");
  const std::size_t body = bytes.size() - 8;
  Reader r(bytes, body);
  if (r.get_string(4, "magic") != std::string(kMagic, 4)) throw FormatError("weight file has bad magic");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kWeightFileVersion) throw FormatError("weight file has unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>("tensor count");

  std::vector<StoredTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = "tensor " + std::to_string(i);
    const auto name_length = r.get<std::uint16_t>(where + " name length");
    std::string name = r.get_string(name_length, where + " name");
    const std::string field = "tensor " + name;
    const auto dtype = r.get<std::uint8_t>(field + " dtype");
    if (dtype > 1) throw FormatError(field + " has unknown dtype " + std::to_string(dtype));
    const auto ndim = r.get<std::uint8_t>(field + " ndim");
    if (ndim == 0) throw FormatError(field + " has zero dimensions");
    Shape shape;
    for (std::uint8_t d = 0; d < ndim; ++d) {
      const auto extent = r.get<std::uint32_t>(field + " dims");
      if (extent == 0) throw FormatError(field + " has a zero extent");
      shape.push_back(extent);
    }
    const std::size_t n = element_count(shape);
    if (dtype == 0) {
      std::vector<float> data(n);
      for (auto& v : data) v = r.get<float>(field + " data");
      out.push_back({std::move(name), Tensor<float>(shape, std::move(data))});
    } else {
      std::vector<double> data(n);
      for (auto& v : data) v = r.get<double>(field + " data");
      out.push_back({std::move(name), Tensor<double>(shape, std::move(data))});
    }
  }
  if (r.position() != body) throw FormatError("weight file has trailing bytes before the checksum");
  if (stored_checksum(bytes) != byte_sum(bytes, body)) throw FormatError("weight file checksum mismatch");
  return out;
}

template <typename T>
void save_weights(const Model<T>& model, const std::filesystem::path& path) {
  std::vector<StoredTensor> tensors;
  const Resolution res = model.resolution();
  tensors.push_back({kModelTensor, Tensor<double>({4}, {static_cast<double>(model.architecture()),
                                                         static_cast<double>(model.head()),
                                                         static_cast<double>(res.height),
                                                         static_cast<double>(res.width)})});
  for (const auto& p : model.parameters()) tensors.push_back({p.name, p.value});
  const auto bytes = encode_weight_file(tensors);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write weight file " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing weight file " + path.string());
}

template <typename T>
Model<T> load_weights(const std::filesystem::path& path) {
  const auto tensors = decode_weight_file(read_file(path));
  if (tensors.empty() || tensors.front().name != kModelTensor ||
      !std::holds_alternative<Tensor<double>>(tensors.front().value) ||
      std::get<Tensor<double>>(tensors.front().value).size() != 4) {
    throw FormatError("weight file lacks the __model__ header tensor");
  }
  const auto& meta = std::get<Tensor<double>>(tensors.front().value);
  const int arch = static_cast<int>(meta[0]);
  const int head = static_cast<int>(meta[1]);
  if (arch < 0 || arch > 1) throw FormatError("weight file names unknown architecture " + std::to_string(arch));
  if (head < 0 || head > 1) throw FormatError("weight file names unknown head " + std::to_string(head));
  const Resolution res{static_cast<std::size_t>(meta[2]), static_cast<std::size_t>(meta[3])};
  Model<T> model = build_model(static_cast<Architecture>(arch), static_cast<Head>(head), res).template cast<T>();

  auto& params = model.parameters();
  if (tensors.size() != params.size() + 1) {
    throw FormatError("weight file holds " + std::to_string(tensors.size() - 1) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const StoredTensor& stored = tensors[i + 1];
    if (stored.name != params[i].name) {
      throw FormatError("weight file tensor " + stored.name + " found where layer tensor " + params[i].name +
                        " was expected");
    }
    std::visit(
        [&](const auto& value) {
          if (value.shape() != params[i].value.shape()) {
            throw FormatError("weight file tensor " + stored.name + " has declared shape " + to_string(value.shape()) +
                              ", layer expects " + to_string(params[i].value.shape()));
          }
          params[i].value = value.template cast<T>();
        },
        stored.value);
  }
  return model;
}

std::uint64_t weight_file_checksum(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 8) throw FormatError("weight file truncated: " + path.string());
  return stored_checksum(bytes);
}

template void save_weights<float>(const Model<float>&, const std::filesystem::path&);
template void save_weights<double>(const Model<double>&, const std::filesystem::path&);
template Model<float> load_weights<float>(const std::filesystem::path&);
template Model<double> load_weights<double>(const std::filesystem::path&);

}  // namespace evasion
