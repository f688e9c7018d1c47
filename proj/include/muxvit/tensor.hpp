#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "muxvit/errors.hpp"

namespace muxvit {

// Dense row-major shape, rank <= 4.
struct Shape {
  std::array<int, 4> dim{1, 1, 1, 1};
  int rank = 0;

  Shape() = default;
  Shape(std::initializer_list<int> dims) {
    if (dims.size() > 4) throw ShapeError("rank > 4 not supported");
    rank = static_cast<int>(dims.size());
    int i = 0;
    for (int d : dims) {
      if (d <= 0) throw ShapeError("non-positive extent " + std::to_string(d));
      dim[i++] = d;
    }
  }

  int operator[](int i) const { return dim[i]; }
  std::size_t numel() const {
    std::size_t n = 1;
    for (int i = 0; i < rank; ++i) n *= static_cast<std::size_t>(dim[i]);
    return n;
  }
  bool operator==(const Shape& o) const {
    if (rank != o.rank) return false;
    for (int i = 0; i < rank; ++i)
      if (dim[i] != o.dim[i]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::string s = "[";
    for (int i = 0; i < rank; ++i) {
      if (i) s += "x";
      s += std::to_string(dim[i]);
    }
    return s + "]";
  }
};

template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(s), data(s.numel(), fill) {}
  Tensor(Shape s, std::vector<T> d) : shape(s), data(std::move(d)) {
    if (shape.numel() != data.size()) throw ShapeError("data length does not match shape " + shape.str());
  }

  std::size_t numel() const { return data.size(); }
  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator()(int i) { return data[static_cast<std::size_t>(i)]; }
  T operator()(int i) const { return data[static_cast<std::size_t>(i)]; }
  T& operator()(int i, int j) { return data[static_cast<std::size_t>(i) * shape.dim[1] + j]; }
  T operator()(int i, int j) const { return data[static_cast<std::size_t>(i) * shape.dim[1] + j]; }
  T& operator()(int i, int j, int k) {
    return data[(static_cast<std::size_t>(i) * shape.dim[1] + j) * shape.dim[2] + k];
  }
  T operator()(int i, int j, int k) const {
    return data[(static_cast<std::size_t>(i) * shape.dim[1] + j) * shape.dim[2] + k];
  }

  bool all_finite() const {
    for (const T& v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
  void check_finite(const char* what) const {
    if (!all_finite()) throw NumericError(std::string(what) + ": non-finite value");
  }
};

template <class T>
inline const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

}  // namespace muxvit
