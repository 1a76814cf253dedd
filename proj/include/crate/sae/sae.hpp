#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include <nlohmann/json.hpp>

#include "crate/data/token_stream.hpp"
#include "crate/lab/dump.hpp"
#include "crate/model/language_model.hpp"
#include "crate/numerics/tensor.hpp"

namespace crate::sae {

struct SaeConfig {
  std::size_t input_dim = 0;   // h_in; 0 = take it from the data
  std::size_t multiplier = 4;  // mu: hidden width = mu * h_in
  double l1 = 1.6e-4;
  double lr = 1.2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::size_t batch = 256;
  std::size_t steps = 2000;
  std::size_t resample_interval = 0;  // steps between resampling checks; 0 disables
  std::size_t dead_window = 10000;    // R: samples without firing that make a unit dead
  std::size_t log_interval = 10;
  std::uint64_t seed = 0;

  std::size_t hidden_dim() const { return multiplier * input_dim; }
  void validate() const;
};

void to_json(nlohmann::json& j, const SaeConfig& c);
void from_json(const nlohmann::json& j, SaeConfig& c);

/// Encoder W1 (m x n), b1 (1 x m); decoder W2 (n x m), b2 (1 x n).
struct SaeParams {
  Mat<double> w1, b1, w2, b2;

  std::size_t input_dim() const { return static_cast<std::size_t>(w2.rows()); }
  std::size_t hidden_dim() const { return static_cast<std::size_t>(w1.rows()); }
  bool finite() const;
};

/// Random unit-norm decoder columns, encoder tied to the decoder transpose,
/// b1 = 0, b2 = per-dimension mean of `data` (or 0 when empty).
SaeParams init_sae(std::size_t input_dim, std::size_t multiplier, const Mat<double>& data, Rng& rng);

/// Exact reconstruction for any input: W1 = [I; -I], W2 = [I, -I], zero biases.
SaeParams identity_sae(std::size_t input_dim);
/// Decoder and b2 zero: every reconstruction is 0.
SaeParams zero_sae(std::size_t input_dim, std::size_t multiplier = 1);

struct SaeOutput {
  Mat<double> hidden;  // N x m
  Mat<double> recon;   // N x n
};

/// a_bar = a - b2; h = ReLU(W1 a_bar + b1); a_hat = W2 h + b2, for each row a.
SaeOutput sae_forward(const Mat<double>& a, const SaeParams& p);

struct SaeLoss {
  double mse = 0;    // (1/N) sum ||a - a_hat||^2
  double l1 = 0;     // (1/N) sum ||h||_1
  double total = 0;  // mse + lambda * l1
};

SaeLoss sae_loss(const Mat<double>& a, const SaeParams& p, double l1_coeff);

/// Loss and its gradient with respect to every parameter.
SaeLoss sae_loss_grad(const Mat<double>& a, const SaeParams& p, double l1_coeff, SaeParams* grad);

/// Scales every decoder column to unit norm (zero columns are left alone).
void normalize_decoder(SaeParams& p);

/// Samples since each hidden unit last fired.
struct FiringStats {
  std::vector<std::uint64_t> since_fire;
  std::uint64_t samples = 0;

  explicit FiringStats(std::size_t hidden = 0) : since_fire(hidden, 0) {}
  void update(const Mat<double>& hidden);
  /// Units silent over the trailing `window` samples.
  std::vector<std::size_t> dead(std::uint64_t window) const;
  /// Fraction of units silent over min(window, samples seen).
  double dead_fraction(std::uint64_t window) const;
};

struct ResampleReport {
  std::vector<std::size_t> resampled;
};

/// Reinitializes units that have not fired over the trailing dead_window
/// samples. Each gets a pool input drawn with probability proportional to its
/// squared reconstruction loss: the decoder column becomes the unit-normalized
/// centered input, the encoder row the same direction scaled to 0.2 times the
/// mean live encoder-row norm, and its bias 0. Live units are not touched.
ResampleReport resample_dead(SaeParams& p, const FiringStats& stats, std::uint64_t dead_window,
                             const Mat<double>& pool, Rng& rng);

struct SaeLogRow {
  std::size_t step = 0;
  double mse = 0;
  double l1 = 0;
  double dead_fraction = 0;
};

struct SaeTrainResult {
  SaeParams params;
  std::vector<SaeLogRow> log;
  std::vector<ResampleReport> resamples;
};

inline constexpr const char* kSaeCsvHeader = "step,mse,l1,dead_fraction";

/// Adam on sae_loss over uniformly sampled rows of `data`, decoder columns
/// renormalized after each step, dead units resampled every
/// resample_interval steps. Starts from `init` when given.
SaeTrainResult train_sae(const Mat<double>& data, SaeConfig config, Rng& rng,
                         const std::filesystem::path& log_csv = {},
                         const SaeParams* init = nullptr);

/// Every token of a dump as one row of activations: (T_e * B_e) x h.
Mat<double> dump_samples(const lab::ActivationDump& dump);

struct RecoveryResult {
  double loss_base = 0;   // unmodified model
  double loss_patch = 0;  // layer activations replaced by SAE reconstructions
  double loss_zero = 0;   // layer activations zeroed
  double score = 0;       // 100 (L_zero - L_patch) / (L_zero - L_base)
};

/// Loss-recovered score on n_batches sampled from `stream`, with the same
/// batches for all three losses. Throws "degenerate_ablation" if zeroing the
/// layer does not increase the loss.
template <class T>
RecoveryResult recovery_score(const model::LanguageModel<T>& model, std::size_t layer,
                              const SaeParams& sae, const data::TokenStream& stream,
                              std::size_t n_batches, std::size_t batch, std::size_t seq, Rng& rng);

void save_sae(const std::filesystem::path& dir, const SaeParams& p, const SaeConfig& config,
              std::size_t step);
SaeParams load_sae(const std::filesystem::path& dir, SaeConfig* config = nullptr);

}  // namespace crate::sae
