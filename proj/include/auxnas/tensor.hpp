#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace auxnas {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimensionError : Error { using Error::Error; };
struct DegenerateShapeError : Error { using Error::Error; };
struct ContractError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct DataError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct GenotypeError : Error { using Error::Error; };
struct CodecError : Error { using Error::Error; };

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Row-major dense array. Activations are NCHW.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> values;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), values(numel(shape), fill) {
    for (int d : shape)
      if (d < 0) throw DimensionError("negative dimension in " + to_string(shape));
  }
  Tensor(Shape s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
    if (numel(shape) != values.size())
      throw DimensionError("shape " + to_string(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
  }

  std::size_t size() const { return values.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
  T* data() { return values.data(); }
  const T* data() const { return values.data(); }
  T& operator[](std::size_t i) { return values[i]; }
  const T& operator[](std::size_t i) const { return values[i]; }

  // NCHW accessor
  T& at(int n, int c, int h, int w) {
    return values[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  const T& at(int n, int c, int h, int w) const {
    return values[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  bool all_finite() const {
    if constexpr (std::is_floating_point_v<T>) {
      for (T v : values)
        if (!std::isfinite(v)) return false;
    }
    return true;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.values.assign(values.begin(), values.end());
    return out;
  }

  bool operator==(const Tensor& o) const = default;
};

}  // namespace auxnas
