#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "crate/data/token_stream.hpp"
#include "crate/model/language_model.hpp"

namespace crate::lab {

/// Hidden activations of one layer over B_e excerpts of T_e tokens.
///
/// File layout: "CRTACT01", u32 LE header length, JSON header, f32 LE
/// activations in (neuron, token, excerpt) order, then the B_e x T_e u32 LE
/// token ids in (excerpt, token) order.
struct ActivationDump {
  static constexpr int kVersion = 1;

  std::string model_id;
  std::string arch;  // "crate" | "gpt"
  std::size_t layer = 0;
  std::size_t hidden = 0;       // h
  std::size_t excerpt_len = 0;  // T_e
  std::size_t n_excerpts = 0;   // B_e
  std::vector<float> activations;     // h * T_e * B_e
  std::vector<std::uint32_t> tokens;  // B_e * T_e

  float at(std::size_t neuron, std::size_t token, std::size_t excerpt) const {
    return activations[(neuron * excerpt_len + token) * n_excerpts + excerpt];
  }
  std::uint32_t token(std::size_t excerpt, std::size_t t) const {
    return tokens[excerpt * excerpt_len + t];
  }

  /// Shape, finiteness, and (crate) nonnegativity. Throws "bad_dump".
  void validate() const;
};

void write_dump(const std::filesystem::path& path, const ActivationDump& dump);
ActivationDump read_dump(const std::filesystem::path& path);

/// Runs the model over B_e random windows of `stream` and captures the hidden
/// activations of each requested layer. Excerpts are forwarded in fixed-size
/// chunks so results do not depend on B_e.
template <class T>
std::vector<ActivationDump> collect_activations(const model::LanguageModel<T>& model,
                                                const data::TokenStream& stream,
                                                const std::vector<std::size_t>& layers,
                                                std::size_t n_excerpts, std::size_t excerpt_len,
                                                Rng& rng, const std::string& model_id);

/// collect_activations + one "layer_<l>.act" file per layer under `out_dir`.
template <class T>
std::vector<std::filesystem::path> dump_activations(
    const model::LanguageModel<T>& model, const data::TokenStream& stream,
    const std::vector<std::size_t>& layers, std::size_t n_excerpts, std::size_t excerpt_len,
    Rng& rng, const std::filesystem::path& out_dir, const std::string& model_id);

std::filesystem::path dump_path(const std::filesystem::path& dir, std::size_t layer);

/// Layers the scoring pipeline evaluates: 0..L-2 (the last layer is excluded).
std::vector<std::size_t> scored_layers(std::size_t n_layer);

inline constexpr double kZeroThreshold = 1e-6;

/// Fraction of entries with |a| <= kZeroThreshold.
double zero_fraction(const ActivationDump& dump);
double zero_fraction(std::span<const float> values);

struct LayerSparsity {
  std::size_t layer = 0;
  double zero_fraction = 0;
  std::size_t entries = 0;
};

std::vector<LayerSparsity> sparsity_report(const std::vector<ActivationDump>& dumps);

inline constexpr const char* kSparsityCsvHeader = "layer,zero_fraction,entries";
void write_sparsity_csv(const std::filesystem::path& path, const std::vector<LayerSparsity>& rows);

}  // namespace crate::lab
