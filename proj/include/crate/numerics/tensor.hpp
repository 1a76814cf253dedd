#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "crate/numerics/error.hpp"

namespace crate {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using MatMap = Eigen::Map<Mat<T>>;

template <class T>
using ConstMatMap = Eigen::Map<const Mat<T>>;

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto dim : shape) n *= dim;
  return n;
}

std::string shape_string(const Shape& shape);

/// Dense row-major tensor. Training paths use Tensor<float>, verification
/// paths Tensor<double>.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> values;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), values(shape_numel(shape), fill) {
    for (auto dim : shape) require(dim > 0, "bad_shape", "tensor dimensions must be positive");
  }
  Tensor(Shape s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
    require(shape_numel(shape) == values.size(), "bad_shape",
            "value count does not match shape " + shape_string(shape));
  }

  static Tensor from_matrix(const Mat<T>& m) {
    return Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                  std::vector<T>(m.data(), m.data() + m.size()));
  }

  std::size_t numel() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }

  /// Leading dimension for 2-D views; rank-1 tensors view as a single row.
  std::size_t rows() const { return shape.size() == 1 ? 1 : shape.front(); }
  std::size_t cols() const { return shape.back(); }

  T& operator()(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

  MatMap<T> matrix() { return MatMap<T>(values.data(), rows(), cols()); }
  ConstMatMap<T> matrix() const { return ConstMatMap<T>(values.data(), rows(), cols()); }

  std::span<T> span() { return values; }
  std::span<const T> span() const { return values; }

  bool all_finite() const {
    for (T v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape, std::vector<U>(values.begin(), values.end()));
  }
};

}  // namespace crate
