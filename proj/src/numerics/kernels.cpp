#include "crate/numerics/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace crate {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
void softmax_inplace(std::span<T> row) {
  T max_value = -std::numeric_limits<T>::infinity();
  for (T v : row) {
    if (std::isnan(v)) {  // propagate so callers see a non-finite loss, not a support error
      std::fill(row.begin(), row.end(), v);
      return;
    }
    max_value = std::max(max_value, v);
  }
  if (max_value == -std::numeric_limits<T>::infinity())
    throw Error("empty_attention_support", "softmax row has no finite entry");
  T total = 0;
  for (T& v : row) {
    v = std::exp(v - max_value);
    total += v;
  }
  for (T& v : row) v /= total;
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& m) {
  Tensor<T> out = m;
  const std::size_t cols = m.cols();
  for (std::size_t r = 0; r < m.rows(); ++r)
    softmax_inplace(std::span<T>(out.values.data() + r * cols, cols));
  return out;
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps) {
  const std::size_t d = x.cols();
  require(d >= 1, "bad_shape", "layer_norm needs d >= 1");
  require(gamma.numel() == d && beta.numel() == d, "bad_shape", "layer_norm affine size mismatch");
  Tensor<T> out = x;
  for (std::size_t r = 0; r < x.numel() / d; ++r) {
    const T* in = x.values.data() + r * d;
    T* y = out.values.data() + r * d;
    T mean = 0;
    for (std::size_t i = 0; i < d; ++i) mean += in[i];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (in[i] - mean) * (in[i] - mean);
    var /= static_cast<T>(d);
    const T inv_std = T(1) / std::sqrt(var + static_cast<T>(eps));
    for (std::size_t i = 0; i < d; ++i)
      y[i] = (in[i] - mean) * inv_std * gamma.values[i] + beta.values[i];
  }
  return out;
}

template <class T>
T gelu(T x) {
  constexpr T kAlpha = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kBeta = static_cast<T>(0.044715);
  return T(0.5) * x * (T(1) + std::tanh(kAlpha * (x + kBeta * x * x * x)));
}

template <class T>
T gelu_derivative(T x) {
  constexpr T kAlpha = static_cast<T>(0.7978845608028654);
  constexpr T kBeta = static_cast<T>(0.044715);
  const T inner = kAlpha * (x + kBeta * x * x * x);
  const T th = std::tanh(inner);
  const T sech2 = T(1) - th * th;
  return T(0.5) * (T(1) + th) + T(0.5) * x * sech2 * kAlpha * (T(1) + T(3) * kBeta * x * x);
}

#define CRATE_INSTANTIATE(T)                                                              \
  template void softmax_inplace<T>(std::span<T>);                                         \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);                                   \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                   double);                                               \
  template T gelu<T>(T);                                                                  \
  template T gelu_derivative<T>(T);

CRATE_INSTANTIATE(float)
CRATE_INSTANTIATE(double)
#undef CRATE_INSTANTIATE

}  // namespace crate
