#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "crate/model/language_model.hpp"

namespace crate::model {

/// R(Z) = 1/2 logdet(I + d / (T eps^2) Z Z^T) for Z of shape T x d, evaluated
/// on whichever Gram matrix (T x T or d x d) is smaller.
double coding_rate(const Tensor<double>& z, double eps);

/// R^c(Z | U_[K]) = sum_k 1/2 logdet(I + p / (T eps^2) (Z U_k)^T (Z U_k)), with
/// U_k the k-th block of p = d / K columns of u (d x d).
double coding_rate_subspaces(const Tensor<double>& z, const Tensor<double>& u, std::size_t heads,
                             double eps);

struct LayerDiagnostics {
  std::size_t layer = 0;
  double rate = 0;           // R(Z^{l+1/2})
  double rate_subspace = 0;  // R^c(Z^{l+1/2} | U^l)
  std::size_t nonzero = 0;   // entries of A with |a| > 1e-6
  std::size_t total = 0;
};

/// Per-layer diagnostics for one sequence. For the GPT twin the subspace
/// bases are the query block of its QKV projection.
template <class T>
std::vector<LayerDiagnostics> layer_diagnostics(const LanguageModel<T>& model,
                                                std::span<const std::uint32_t> tokens);

/// One randomized causality trial: random arch and config (L <= 3, d <= 64),
/// random sequence, every position >= s perturbed; logits before s must be
/// bitwise unchanged. `description` receives the trial setup.
bool causality_trial(Rng& rng, std::string* description = nullptr);

}  // namespace crate::model
