#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <string_view>
#include <variant>

#include "auxnas/tensor.hpp"

// TNSR container: "TNSR" | u32 version=1 | u8 dtype {1:f32, 2:f64, 3:i32} |
// u8 ndim | ndim x u32 dims | row-major payload. Integers are little-endian.
namespace auxnas::io {

inline constexpr std::uint32_t kTensorVersion = 1;

using AnyTensor = std::variant<Tensor<float>, Tensor<double>, Tensor<std::int32_t>>;

template <class T>
constexpr std::uint8_t dtype_code() {
  if constexpr (std::is_same_v<T, float>) return 1;
  else if constexpr (std::is_same_v<T, double>) return 2;
  else if constexpr (std::is_same_v<T, std::int32_t>) return 3;
  else static_assert(sizeof(T) == 0, "unsupported tensor dtype");
}

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(std::string_view in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw FormatError("truncated tensor data");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(U);
  return v;
}

template <class T>
using Bits = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;

}  // namespace detail

template <class T>
void append_tensor(std::string& out, const Tensor<T>& t) {
  if (t.shape.size() > 255) throw FormatError("tensor rank exceeds 255");
  out.append("TNSR", 4);
  detail::put_le<std::uint32_t>(out, kTensorVersion);
  out.push_back(static_cast<char>(dtype_code<T>()));
  out.push_back(static_cast<char>(t.shape.size()));
  for (int d : t.shape) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  out.reserve(out.size() + t.size() * sizeof(T));
  for (T v : t.values) detail::put_le(out, std::bit_cast<detail::Bits<T>>(v));
}

template <class T>
std::string encode_tensor(const Tensor<T>& t) {
  std::string out;
  append_tensor(out, t);
  return out;
}

namespace detail {
template <class T>
Tensor<T> read_payload(std::string_view in, std::size_t& pos, Shape shape) {
  const std::size_t n = numel(shape);
  if (in.size() - pos < n * sizeof(T)) throw FormatError("truncated tensor payload");
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < n; ++i) t[i] = std::bit_cast<T>(get_le<Bits<T>>(in, pos));
  return t;
}
}  // namespace detail

// Parses one tensor starting at pos and advances pos past it.
inline AnyTensor decode_tensor(std::string_view in, std::size_t& pos) {
  if (in.size() < pos + 4 || in.substr(pos, 4) != "TNSR") throw FormatError("bad tensor magic");
  pos += 4;
  const auto version = detail::get_le<std::uint32_t>(in, pos);
  if (version != kTensorVersion) throw FormatError("unsupported tensor version " + std::to_string(version));
  const auto dtype = detail::get_le<std::uint8_t>(in, pos);
  const auto ndim = detail::get_le<std::uint8_t>(in, pos);
  Shape shape;
  for (int i = 0; i < ndim; ++i) {
    const auto d = detail::get_le<std::uint32_t>(in, pos);
    if (d > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) throw FormatError("dimension too large");
    shape.push_back(static_cast<int>(d));
  }
  switch (dtype) {
    case 1: return detail::read_payload<float>(in, pos, std::move(shape));
    case 2: return detail::read_payload<double>(in, pos, std::move(shape));
    case 3: return detail::read_payload<std::int32_t>(in, pos, std::move(shape));
    default: throw FormatError("unknown dtype code " + std::to_string(dtype));
  }
}

inline AnyTensor decode_tensor(std::string_view in) {
  std::size_t pos = 0;
  AnyTensor t = decode_tensor(in, pos);
  if (pos != in.size()) throw FormatError("trailing bytes after tensor");
  return t;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

template <class T>
void write_tensor_file(const std::filesystem::path& path, const Tensor<T>& t) {
  write_file(path, encode_tensor(t));
}

inline AnyTensor read_tensor_file(const std::filesystem::path& path) { return decode_tensor(read_file(path)); }

// Reads a tensor file and requires a specific dtype.
template <class T>
Tensor<T> read_tensor_as(const std::filesystem::path& path) {
  AnyTensor any = read_tensor_file(path);
  if (auto* t = std::get_if<Tensor<T>>(&any)) return std::move(*t);
  throw FormatError(path.string() + ": unexpected dtype");
}

// Floating tensor of either width converted to T; integer tensors are rejected.
template <class T>
Tensor<T> as_floating(const AnyTensor& any) {
  if (const auto* f = std::get_if<Tensor<float>>(&any)) return f->template cast<T>();
  if (const auto* d = std::get_if<Tensor<double>>(&any)) return d->template cast<T>();
  throw FormatError("expected a floating-point tensor");
}

}  // namespace auxnas::io
