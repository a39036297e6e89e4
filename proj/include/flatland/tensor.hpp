#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace flatland {

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

inline std::int64_t shape_numel(const std::vector<int>& shape) {
  if (shape.empty()) throw std::invalid_argument("tensor shape must have at least one dimension");
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 1) throw std::invalid_argument("tensor dimension must be >= 1, got shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

/// Dense row-major tensor. The scalar type is a template parameter so the
/// same code can run in float for training and in double where tests need
/// the extra precision.
template <typename T>
struct TensorT {
  std::vector<int> shape;
  std::vector<T> data;

  TensorT() = default;

  explicit TensorT(std::vector<int> s, T fill = T(0))
      : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), fill) {}

  static TensorT from(std::vector<int> s, std::vector<T> d) {
    if (shape_numel(s) != static_cast<std::int64_t>(d.size())) {
      throw std::invalid_argument("tensor data length " + std::to_string(d.size()) +
                                  " does not match shape " + shape_str(s));
    }
    TensorT t;
    t.shape = std::move(s);
    t.data = std::move(d);
    return t;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }

  int dim(int i) const {
    if (i < 0 || i >= ndim()) throw std::out_of_range("tensor dim index out of range");
    return shape[static_cast<std::size_t>(i)];
  }

  T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

  /// Element access for the NCHW layout used throughout.
  T& at4(int n, int c, int h, int w) {
    return data[static_cast<std::size_t>(((static_cast<std::int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }
  const T& at4(int n, int c, int h, int w) const {
    return data[static_cast<std::size_t>(((static_cast<std::int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }

  T& at2(int r, int c) { return data[static_cast<std::size_t>(static_cast<std::int64_t>(r) * shape[1] + c)]; }
  const T& at2(int r, int c) const {
    return data[static_cast<std::size_t>(static_cast<std::int64_t>(r) * shape[1] + c)];
  }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

using Tensor = TensorT<float>;

template <typename T>
void require_shape(const TensorT<T>& t, const std::vector<int>& want, const char* what) {
  if (t.shape != want) {
    throw std::invalid_argument(std::string(what) + ": expected shape " + shape_str(want) +
                                ", got " + shape_str(t.shape));
  }
}

template <typename T>
void require_ndim(const TensorT<T>& t, int nd, const char* what) {
  if (t.ndim() != nd) {
    throw std::invalid_argument(std::string(what) + ": expected " + std::to_string(nd) +
                                "-d tensor, got shape " + shape_str(t.shape));
  }
}

}  // namespace flatland
