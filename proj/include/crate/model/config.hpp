#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace crate::model {

enum class Arch { kCrate, kGpt };

std::string_view arch_name(Arch arch);
Arch parse_arch(std::string_view name);

/// Architecture hyperparameters shared by the CRATE model and its GPT twin.
/// The ISTA fields are ignored for the GPT architecture.
struct ModelConfig {
  Arch arch = Arch::kCrate;
  std::size_t d_model = 64;     // residual width d
  std::size_t n_head = 4;       // K; per-head subspace dimension p = d / K
  std::size_t n_layer = 2;      // L
  std::size_t d_hidden = 256;   // h = 4d
  std::size_t vocab_size = 256; // V
  std::size_t context = 64;     // N
  double ista_step = 0.1;       // eta
  double ista_lambda = 0.1;     // lambda
  std::size_t ista_iters = 2;   // t
  double dropout = 0.0;
  double rate_eps = 0.5;        // epsilon of the coding-rate diagnostics

  std::size_t head_dim() const { return d_model / n_head; }

  /// Throws crate::Error("bad_config") on any violated invariant.
  void validate() const;

  /// Named presets from the published configuration table: "1L", "2L", "3L", "S", "B".
  static ModelConfig preset(std::string_view name, Arch arch);
};

void to_json(nlohmann::json& j, const ModelConfig& c);
/// Strict: unknown keys are rejected. Missing keys keep their defaults.
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Exact learnable-parameter counts under this repository's tying and bias
/// conventions (head tied to the token embedding).
struct ParamCount {
  std::uint64_t total = 0;
  std::uint64_t token_embedding = 0;
  std::uint64_t position_embedding = 0;
  std::uint64_t per_layer = 0;
  std::uint64_t attention_input_weights = 0;  // per layer: U (crate) or W_qkv (gpt), no bias
  std::uint64_t mlp_weights = 0;              // per layer: D (crate) or W_up + W_down (gpt), no bias
  std::uint64_t final_norm = 0;

  /// Total without positional embeddings, the convention nanoGPT-style
  /// reporting uses.
  std::uint64_t without_position() const { return total - position_embedding; }
};

ParamCount count_params(const ModelConfig& config);

}  // namespace crate::model
