#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crate/interp/backend.hpp"
#include "crate/lab/dump.hpp"
#include "crate/lab/excerpts.hpp"
#include "crate/numerics/rng.hpp"

namespace crate::interp {

inline constexpr int kMaxLevel = 10;

/// Integer levels 0..10: negatives floor to 0, `max` maps to 10, rounded to
/// nearest. A nonpositive `max` maps everything to 0.
std::vector<int> normalize_activations(std::span<const float> vals, float max);
/// Same, anchored at the largest value of `vals`.
std::vector<int> normalize_activations(std::span<const float> vals);

/// Pearson correlation; nullopt when either vector has zero variance.
/// Throws bad_argument unless the lengths are equal and at least 2.
std::optional<double> correlation(std::span<const double> x, std::span<const double> y);

enum class ScoreStatus { kOk, kUndefined };
std::string_view status_name(ScoreStatus s);

struct NeuronScore {
  std::size_t layer = 0;
  std::size_t neuron = 0;
  std::string explanation;
  std::vector<std::vector<double>> true_acts;  // per simulation excerpt
  std::vector<std::vector<double>> simulated;  // per simulation excerpt
  double rho = 0;                              // meaningful only when ok
  ScoreStatus status = ScoreStatus::kUndefined;
};

/// Explains the neuron from its explanation excerpts, simulates the
/// simulation excerpts from tokens alone, and correlates true with simulated
/// activations over all simulation tokens concatenated.
NeuronScore score_neuron(const lab::ActivationDump& dump, std::size_t neuron,
                         const lab::MetricConfig& metric, Backend& backend, Rng& rng);

struct LayerScore {
  std::size_t layer = 0;
  double mean_rho = 0;  // over ok neurons
  double std_rho = 0;   // population deviation over ok neurons
  std::size_t n_ok = 0;
  std::size_t n_undefined = 0;
  std::vector<NeuronScore> neurons;  // ascending neuron id
};

struct ScoreOptions {
  std::size_t sample = 0;   // neurons scored per layer; 0 = all
  std::size_t workers = 1;  // concurrent neuron scorers
  std::size_t hist_bins = 20;
};

struct ModelScore {
  std::string model_id;
  std::string metric;
  std::size_t hist_bins = 20;
  std::vector<LayerScore> layers;
};

/// Scores every dump whose layer is below n_layer - 1 (the last layer is never
/// scored). Each neuron draws from its own stream derived from one draw of
/// `rng`, so results do not depend on worker count or scheduling. Throws
/// "all_undefined" when a layer has no ok neuron.
ModelScore score_model(const std::vector<lab::ActivationDump>& dumps, std::size_t n_layer,
                       const lab::MetricConfig& metric, Backend& backend,
                       const ScoreOptions& options, Rng& rng);

/// Bin counts of ok ρ values over [-1, 1]; the last bin includes 1.
std::vector<std::size_t> rho_histogram(const LayerScore& layer, std::size_t bins);

inline constexpr const char* kScoreCsvHeader = "layer,mean_rho,n_ok,n_undefined";
void write_score_csv(const std::filesystem::path& path, const ModelScore& score);
nlohmann::json histogram_json(const ModelScore& score);
void write_histogram_json(const std::filesystem::path& path, const ModelScore& score);
/// One JSON object per scored neuron: layer, neuron, status, rho, explanation.
void write_neuron_jsonl(const std::filesystem::path& path, const ModelScore& score);

/// Checks the three metric rows against the reference table, both as
/// configured and as produced by select_excerpts on a synthetic dump.
/// Returns one message per mismatch.
std::vector<std::string> check_metric_table();

}  // namespace crate::interp
