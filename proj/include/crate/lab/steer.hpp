#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "crate/model/language_model.hpp"

namespace crate::lab {

struct SteerOptions {
  bool all_positions = false;  // default: patch only the final prompt position
  std::size_t top_k = 10;
};

struct TokenDelta {
  std::uint32_t token = 0;
  double prob_delta = 0;   // steered - baseline next-token probability
  double logit_delta = 0;  // steered - baseline logit
};

struct SteerResult {
  std::vector<double> baseline_logits;  // next-token logits at the final position
  std::vector<double> steered_logits;
  std::vector<double> baseline_probs;
  std::vector<double> steered_probs;
  std::vector<TokenDelta> top;  // top_k by prob_delta, descending (ties by token id)
  double original_activation = 0;  // neuron value at the final position before patching
};

/// Sets activation `neuron` of layer `layer` to `value` (final position, or
/// every position) and reads out the change in next-token prediction. The
/// patch happens between encode and decode, so for CRATE the decoded output
/// is exactly D times the patched code.
template <class T>
SteerResult steer(const model::LanguageModel<T>& model, std::size_t layer, std::size_t neuron,
                  double value, std::span<const std::uint32_t> prompt,
                  const SteerOptions& options = {});

}  // namespace crate::lab
