#pragma once

#include "crate/model/language_model.hpp"

namespace crate::model {

/// Config-matched GPT-2 style decoder: pre-LN blocks, separate Q/K/V, GELU MLP.
/// encode() returns the post-GELU hidden state (may be negative).
template <class T>
class GptModel final : public LanguageModel<T> {
 public:
  GptModel(ModelConfig config, Rng& rng);

  std::unique_ptr<LanguageModel<T>> clone() const override;

  ag::Var attention_block(ag::Tape<T>& tape, std::span<const ag::Var> bound, std::size_t layer,
                          ag::Var z, std::size_t batch, std::size_t seq,
                          const ForwardOptions<T>& options) const override;
  ag::Var encode(ag::Tape<T>& tape, std::span<const ag::Var> bound, std::size_t layer,
                 ag::Var z_half) const override;
  ag::Var decode(ag::Tape<T>& tape, std::span<const ag::Var> bound, std::size_t layer,
                 ag::Var z_half, ag::Var activations,
                 const ForwardOptions<T>& options) const override;
};

}  // namespace crate::model
