#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "crate/model/config.hpp"
#include "crate/model/params.hpp"
#include "crate/numerics/autograd.hpp"
#include "crate/numerics/rng.hpp"

namespace crate::model {

/// Called with the (B*T) x h activation matrix of a layer before it is
/// decoded back into the residual width. The hook may overwrite entries.
template <class T>
using ActivationHook = std::function<void(std::size_t layer, Mat<T>& activations)>;

template <class T>
struct ForwardOptions {
  bool cache = false;          // keep per-layer activations and residuals in the trace
  bool training = false;       // enables dropout
  Rng* dropout_rng = nullptr;  // required when training with dropout > 0
  ActivationHook<T> hook;
};

template <class T>
struct ForwardTrace {
  ag::Var logits;                          // (B*T) x V
  std::vector<ag::Var> layer_inputs;       // Z^l
  std::vector<ag::Var> attention_outputs;  // Z^{l+1/2}
  std::vector<ag::Var> activations;        // A per layer, after the hook
};

/// Shared skeleton of both architectures: token + position embedding, L
/// blocks of (attention, encode, decode), final layer norm and a head tied to
/// the token embedding.
///
/// encode() produces the interpretable hidden activations (CRATE: the ISTA
/// sparse code A_t; GPT: post-GELU MLP hidden) and decode() maps them back to
/// the residual stream. Hooks sit between the two.
template <class T>
class LanguageModel {
 public:
  explicit LanguageModel(ModelConfig config);
  virtual ~LanguageModel() = default;

  const ModelConfig& config() const { return config_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  virtual std::unique_ptr<LanguageModel> clone() const = 0;

  ForwardTrace<T> forward(ag::Tape<T>& tape, std::span<const ag::Var> bound,
                          std::span<const std::uint32_t> tokens, std::size_t batch,
                          std::size_t seq, const ForwardOptions<T>& options = {}) const;

  /// Inference convenience: logits as a (B*T) x V tensor, gradients off.
  Tensor<T> logits(std::span<const std::uint32_t> tokens, std::size_t batch, std::size_t seq,
                   const ActivationHook<T>& hook = {}) const;

  /// Mean next-token cross-entropy, gradients off.
  double loss(std::span<const std::uint32_t> inputs, std::span<const std::uint32_t> targets,
              std::size_t batch, std::size_t seq, const ActivationHook<T>& hook = {}) const;

  // Block-level pieces, exposed for oracles and interventions.
  ag::Var embed(ag::Tape<T>& tape, std::span<const ag::Var> bound,
                std::span<const std::uint32_t> tokens, std::size_t batch, std::size_t seq) const;
  virtual ag::Var attention_block(ag::Tape<T>& tape, std::span<const ag::Var> bound,
                                  std::size_t layer, ag::Var z, std::size_t batch,
                                  std::size_t seq, const ForwardOptions<T>& options) const = 0;
  virtual ag::Var encode(ag::Tape<T>& tape, std::span<const ag::Var> bound, std::size_t layer,
                         ag::Var z_half) const = 0;
  virtual ag::Var decode(ag::Tape<T>& tape, std::span<const ag::Var> bound, std::size_t layer,
                         ag::Var z_half, ag::Var activations,
                         const ForwardOptions<T>& options) const = 0;
  ag::Var head(ag::Tape<T>& tape, std::span<const ag::Var> bound, ag::Var z) const;

  /// Index of a parameter within the store (and within a bound span).
  std::size_t slot(std::string_view name) const { return params_.index_of(name); }

 protected:
  void register_embeddings(Rng& rng);
  void register_final_norm();
  ag::Var maybe_dropout(ag::Tape<T>& tape, ag::Var x, const ForwardOptions<T>& options) const;

  ModelConfig config_;
  ParamStore<T> params_;
};

/// Builds a freshly initialized model of config.arch.
template <class T>
std::unique_ptr<LanguageModel<T>> make_model(const ModelConfig& config, Rng& rng);

/// Same architecture and parameters in another precision.
template <class To, class From>
std::unique_ptr<LanguageModel<To>> convert_model(const LanguageModel<From>& model);

/// "h{layer}.{suffix}"
std::string layer_param(std::size_t layer, std::string_view suffix);

template <class T>
Tensor<T> normal_init(Shape shape, double stddev, Rng& rng);
template <class T>
Tensor<T> uniform_init(Shape shape, double bound, Rng& rng);

}  // namespace crate::model
