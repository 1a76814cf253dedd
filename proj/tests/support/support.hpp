#pragma once

// Shared fixtures and independent oracles for the unit and acceptance tests.
// Oracles here deliberately use plain loops rather than the library kernels.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "crate/lab/dump.hpp"
#include "crate/model/language_model.hpp"
#include "crate/numerics/rng.hpp"
#include "crate/numerics/tensor.hpp"

namespace crate::testkit {

/// Deterministic English-like text: Zipf-distributed pseudo-words assembled
/// into sentences and paragraphs. Exactly `bytes` long.
std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed);

/// Unigram entropy (nats) computed directly from byte counts.
double byte_entropy(const std::string& text);

/// Fresh temporary directory under the system temp path.
std::filesystem::path temp_dir(const std::string& tag);

Tensor<double> random_tensor(Shape shape, double stddev, Rng& rng);

/// Row-wise layer norm with unit gain and zero bias, straight from the definition.
Tensor<double> plain_layer_norm(const Tensor<double>& x, double eps = 1e-5);

/// Two ISTA steps written out term by term:
///   A1 = ReLU(eta * D^T x - eta * lambda)
///   A2 = ReLU(A1 + eta * (D^T x - D^T D A1) - eta * lambda)
/// for every token row x of `x` (already normalized). Returns A2 (T x h).
Tensor<double> ista_two_step_expansion(const Tensor<double>& x, const Tensor<double>& dict,
                                       double eta, double lambda);

/// Objective 1/2 ||x - D a||^2 + lambda * sum(a) for a single vector.
double lasso_objective(const std::vector<double>& x, const Tensor<double>& dict,
                       const std::vector<double>& a, double lambda);

/// Projected (a >= 0) cyclic coordinate descent on the nonnegative LASSO.
std::vector<double> nonneg_lasso_cd(const std::vector<double>& x, const Tensor<double>& dict,
                                    double lambda, std::size_t sweeps = 20000);

/// Symmetric eigenvalues via cyclic Jacobi rotations.
std::vector<double> jacobi_eigenvalues(Tensor<double> sym);

/// Logits of `tokens` with layer `layer`'s activations patched by `patch`,
/// computed by stepping through the public block API on a fresh tape.
template <class T>
Tensor<T> patched_forward(const model::LanguageModel<T>& model,
                          const std::vector<std::uint32_t>& tokens, std::size_t layer,
                          const std::function<void(Mat<T>&)>& patch);

/// Small model config used across tests.
model::ModelConfig tiny_config(model::Arch arch, std::size_t d = 8, std::size_t heads = 2,
                               std::size_t layers = 2, std::size_t vocab = 11,
                               std::size_t context = 16);

/// Max relative error between tape gradients and central differences of the
/// mean next-token loss over every parameter of a freshly initialized f64
/// model (d=8, K=2, L=2, V=11, T=5). Weights are drawn wider than the
/// training init so every gradient sits well above the rounding floor.
double full_model_grad_error(model::Arch arch, std::uint64_t seed, double h = 1e-5);

/// One randomized causality trial: random arch/config (L <= 3, d <= 64), random
/// sequence, perturb every position >= s, and compare logits before s bitwise.
/// Returns false on any mismatch; `description` receives the trial setup.
bool causality_trial(Rng& rng, std::string* description = nullptr);

/// Dump with sparse nonnegative activations (each entry nonzero with
/// probability `density`, uniform in (0, scale)) and uniform byte tokens.
lab::ActivationDump synthetic_dump(std::size_t layer, std::size_t hidden, std::size_t excerpt_len,
                                   std::size_t n_excerpts, std::uint64_t seed,
                                   double density = 0.3, double scale = 1.0);

}  // namespace crate::testkit
