#pragma once

#include <vector>

#include "crate/model/language_model.hpp"

namespace crate::model {

/// Overcomplete ISTA sparse coding on already-normalized rows x (T x d)
/// against dictionary D (d x h):
///
///   A_1 = ReLU(eta * x D - eta * lambda)
///   A_k = ReLU(A_{k-1} - eta * (A_{k-1} D^T - x) D - eta * lambda),  k = 2..t
///
/// Rows are tokens, so x D is D^T x per token and A D^T is D A. When `stages`
/// is given it receives A_1..A_t.
template <class T>
ag::Var ista_code(ag::Tape<T>& tape, ag::Var x, ag::Var dict, T eta, T lambda, std::size_t iters,
                  std::vector<ag::Var>* stages = nullptr);

template <class T>
struct IstaResult {
  Tensor<T> output;              // D A_t, T x d
  Tensor<T> code;                // A_t, T x h
  std::vector<Tensor<T>> stages; // A_1..A_t
};

/// Full ISTA block without a surrounding residual: x = LN(z_half), code via
/// ista_code, output D A_t.
template <class T>
IstaResult<T> ista_forward(const Tensor<T>& z_half, const Tensor<T>& dict, double eta,
                           double lambda, std::size_t iters, const Tensor<T>& gamma,
                           const Tensor<T>& beta);

/// Causal multi-head subspace self-attention with its residual:
/// Z + (MultiHead(q = k = v = LN(Z) U) W_proj + b_proj).
template <class T>
ag::Var mssa(ag::Tape<T>& tape, ag::Var z, ag::Var gamma, ag::Var beta, ag::Var u,
             ag::Var proj_w, ag::Var proj_b, std::size_t batch, std::size_t seq,
             std::size_t heads);

template <class T>
class CrateModel final : public LanguageModel<T> {
 public:
  CrateModel(ModelConfig config, Rng& rng);

  std::unique_ptr<LanguageModel<T>> clone() const override;

  ag::Var attention_block(ag::Tape<T>& tape, std::span<const ag::Var> bound, std::size_t layer,
                          ag::Var z, std::size_t batch, std::size_t seq,
                          const ForwardOptions<T>& options) const override;
  ag::Var encode(ag::Tape<T>& tape, std::span<const ag::Var> bound, std::size_t layer,
                 ag::Var z_half) const override;
  ag::Var decode(ag::Tape<T>& tape, std::span<const ag::Var> bound, std::size_t layer,
                 ag::Var z_half, ag::Var activations,
                 const ForwardOptions<T>& options) const override;

  /// Encode with access to the intermediate ISTA stages A_1..A_t.
  ag::Var encode_stages(ag::Tape<T>& tape, std::span<const ag::Var> bound, std::size_t layer,
                        ag::Var z_half, std::vector<ag::Var>* stages) const;

  /// Z^{l+1/2} for a single sequence, gradients off.
  Tensor<T> mssa_forward(std::size_t layer, const Tensor<T>& z) const;
  /// (Z^{l+1}, A_t) for a single sequence, gradients off.
  IstaResult<T> ista_forward(std::size_t layer, const Tensor<T>& z_half) const;
};

}  // namespace crate::model
