#pragma once

// TNSR tensor files and named tensor collections.
//
// Single tensor record (all integers little-endian):
//   "TNSR" | u8 version (=1) | u8 dtype (0=f32, 1=f64, 2=i32) | u8 ndim |
//   u64 shape[ndim] | row-major payload
//
// A collection is a binary file of concatenated records plus a JSON sidecar
// "<path>.json" naming each record, its byte offset, dtype and shape, and
// carrying free-form metadata.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <type_traits>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "posematch/geometry.hpp"

namespace posematch {

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1, kI32 = 2 };

inline std::string dtype_name(DType d) {
  switch (d) {
    case DType::kF32: return "f32";
    case DType::kF64: return "f64";
    case DType::kI32: return "i32";
  }
  return "?";
}

/// Values are held as double; f32 and i32 payloads convert exactly.
struct Tensor {
  DType dtype = DType::kF64;
  std::vector<std::uint64_t> shape;
  std::vector<double> values;

  std::uint64_t numel() const {
    std::uint64_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

inline constexpr std::uint8_t kTensorVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.append(bytes.data(), sizeof(T));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) fail(ErrorCode::kCorruptFile, "tensor data truncated");
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), in.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  pos += sizeof(T);
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace detail

inline void encode_tensor(std::string& out, const Tensor& t) {
  if (t.values.size() != t.numel()) fail(ErrorCode::kShapeMismatch, "tensor value count does not match its shape");
  if (t.shape.size() > 255) fail(ErrorCode::kShapeMismatch, "too many tensor dimensions");
  out.append("TNSR", 4);
  detail::put_le<std::uint8_t>(out, kTensorVersion);
  detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype));
  detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape.size()));
  for (auto s : t.shape) detail::put_le<std::uint64_t>(out, s);
  for (double v : t.values) {
    switch (t.dtype) {
      case DType::kF32: detail::put_le<float>(out, static_cast<float>(v)); break;
      case DType::kF64: detail::put_le<double>(out, v); break;
      case DType::kI32: detail::put_le<std::int32_t>(out, static_cast<std::int32_t>(v)); break;
    }
  }
}

inline Tensor decode_tensor(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size() || in.compare(pos, 4, "TNSR") != 0) fail(ErrorCode::kCorruptFile, "bad tensor magic");
  pos += 4;
  const auto version = detail::get_le<std::uint8_t>(in, pos);
  if (version != kTensorVersion) fail(ErrorCode::kCorruptFile, "unsupported tensor version");
  const auto code = detail::get_le<std::uint8_t>(in, pos);
  if (code > 2) fail(ErrorCode::kCorruptFile, "unknown dtype code");
  Tensor t;
  t.dtype = static_cast<DType>(code);
  const auto ndim = detail::get_le<std::uint8_t>(in, pos);
  for (int d = 0; d < ndim; ++d) t.shape.push_back(detail::get_le<std::uint64_t>(in, pos));
  const std::uint64_t n = t.numel();
  const std::size_t width = t.dtype == DType::kF64 ? 8 : 4;
  if (n > (in.size() - pos) / width) fail(ErrorCode::kCorruptFile, "tensor payload truncated");
  t.values.resize(static_cast<std::size_t>(n));
  for (auto& v : t.values) {
    switch (t.dtype) {
      case DType::kF32: v = detail::get_le<float>(in, pos); break;
      case DType::kF64: v = detail::get_le<double>(in, pos); break;
      case DType::kI32: v = detail::get_le<std::int32_t>(in, pos); break;
    }
  }
  return t;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIoError, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIoError, "cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::kIoError, "write failed for " + path);
}

inline void save_tensor(const std::string& path, const Tensor& t) {
  std::string bytes;
  encode_tensor(bytes, t);
  write_file(path, bytes);
}

inline Tensor load_tensor(const std::string& path) {
  const std::string bytes = read_file(path);
  std::size_t pos = 0;
  Tensor t = decode_tensor(bytes, pos);
  if (pos != bytes.size()) fail(ErrorCode::kCorruptFile, "trailing bytes after tensor");
  return t;
}

// ---------------------------------------------------------------------------
// Matrix conversion

inline Tensor to_tensor(const Matrix& m, DType dtype = DType::kF64) {
  Tensor t;
  t.dtype = dtype;
  t.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.values.assign(m.data(), m.data() + m.size());
  return t;
}

inline Tensor to_tensor(const Points& p) { return to_tensor(Matrix(p)); }

inline Tensor to_tensor(const Vector& v) {
  Tensor t;
  t.shape = {static_cast<std::uint64_t>(v.size())};
  t.values.assign(v.data(), v.data() + v.size());
  return t;
}

inline Matrix to_matrix(const Tensor& t) {
  if (t.shape.size() == 1) {
    Matrix m(1, static_cast<Index>(t.shape[0]));
    std::copy(t.values.begin(), t.values.end(), m.data());
    return m;
  }
  if (t.shape.size() != 2) fail(ErrorCode::kShapeMismatch, "expected a 2-D tensor");
  Matrix m(static_cast<Index>(t.shape[0]), static_cast<Index>(t.shape[1]));
  std::copy(t.values.begin(), t.values.end(), m.data());
  return m;
}

inline Points to_points(const Tensor& t) {
  if (t.shape.size() != 2 || t.shape[1] != 3) fail(ErrorCode::kShapeMismatch, "expected an N x 3 point tensor");
  return to_matrix(t);
}

inline Vector to_vector(const Tensor& t) {
  Vector v(static_cast<Index>(t.values.size()));
  std::copy(t.values.begin(), t.values.end(), v.data());
  return v;
}

// ---------------------------------------------------------------------------
// Named collections

class TensorCollection {
 public:
  nlohmann::json meta = nlohmann::json::object();

  void put(const std::string& name, Tensor t) {
    for (auto& [n, existing] : entries_)
      if (n == name) {
        existing = std::move(t);
        return;
      }
    entries_.emplace_back(name, std::move(t));
  }

  bool contains(const std::string& name) const {
    for (const auto& [n, t] : entries_)
      if (n == name) return true;
    return false;
  }

  const Tensor& get(const std::string& name) const {
    for (const auto& [n, t] : entries_)
      if (n == name) return t;
    fail(ErrorCode::kCorruptFile, "missing tensor '" + name + "'");
  }

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

  /// Writes `path` (records) and `path`.json (manifest).
  void save(const std::string& path) const {
    std::string bytes;
    nlohmann::json manifest;
    manifest["format"] = "TNSR-collection";
    manifest["version"] = kTensorVersion;
    manifest["meta"] = meta;
    manifest["tensors"] = nlohmann::json::array();
    for (const auto& [name, t] : entries_) {
      nlohmann::json e;
      e["name"] = name;
      e["offset"] = bytes.size();
      e["dtype"] = dtype_name(t.dtype);
      e["shape"] = t.shape;
      encode_tensor(bytes, t);
      manifest["tensors"].push_back(e);
    }
    write_file(path, bytes);
    write_file(path + ".json", manifest.dump(2) + "\n");
  }

  static TensorCollection load(const std::string& path) {
    const std::string bytes = read_file(path);
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(read_file(path + ".json"));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kCorruptFile, std::string("bad manifest: ") + e.what());
    }
    if (manifest.value("format", "") != "TNSR-collection") fail(ErrorCode::kCorruptFile, "not a tensor collection");
    TensorCollection c;
    c.meta = manifest.value("meta", nlohmann::json::object());
    try {
      for (const auto& e : manifest.at("tensors")) {
        std::size_t pos = e.at("offset").get<std::size_t>();
        Tensor t = decode_tensor(bytes, pos);
        if (t.shape != e.at("shape").get<std::vector<std::uint64_t>>() || dtype_name(t.dtype) != e.at("dtype"))
          fail(ErrorCode::kCorruptFile, "manifest disagrees with record '" + e.at("name").get<std::string>() + "'");
        c.put(e.at("name").get<std::string>(), std::move(t));
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kCorruptFile, std::string("bad manifest entry: ") + e.what());
    }
    return c;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

}  // namespace posematch
