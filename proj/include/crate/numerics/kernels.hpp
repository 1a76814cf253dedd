#pragma once

#include <span>

#include "crate/numerics/tensor.hpp"

namespace crate {

inline constexpr double kLayerNormEps = 1e-5;

/// Row-wise softmax with per-row max subtraction. Entries may be -inf
/// (masked); a row that is entirely -inf throws "empty_attention_support".
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& m);

/// In-place softmax of one row segment; same contract as softmax_rows.
template <class T>
void softmax_inplace(std::span<T> row);

/// Normalizes over the last dimension, then applies gamma/beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = kLayerNormEps);

/// GELU, tanh approximation.
template <class T>
T gelu(T x);

template <class T>
T gelu_derivative(T x);

}  // namespace crate
