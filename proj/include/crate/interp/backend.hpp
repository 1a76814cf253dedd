#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "crate/lab/dump.hpp"

namespace crate::interp {

struct NeuronRef {
  std::string model_id;
  std::size_t layer = 0;
  std::size_t neuron = 0;
};

/// Identifies one simulation excerpt without carrying its activations.
struct ExcerptRef {
  NeuronRef neuron;
  std::size_t index = 0;   // position in the simulation set
  std::size_t source = 0;  // dump excerpt
  std::size_t offset = 0;  // first token within the dump excerpt
  std::size_t length = 0;
};

/// What the explanation step sees: tokens with their 0..10 activation levels.
struct ExplanationExcerpt {
  std::vector<std::uint32_t> tokens;
  std::vector<int> levels;
};

/// What the simulation step sees: the explanation and the tokens. There is no
/// activation field, so a simulator cannot read the values it must predict.
struct SimulationRequest {
  std::string explanation;
  std::vector<std::uint32_t> tokens;
  ExcerptRef ref;
};

/// Explanation model and simulation model of the scoring loop. Implementations
/// are called concurrently when scoring uses more than one worker.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string explain(const NeuronRef& neuron,
                              const std::vector<ExplanationExcerpt>& excerpts) = 0;
  /// One predicted activation per request token.
  virtual std::vector<double> simulate(const SimulationRequest& request) = 0;
};

/// Ground-truth side channel for oracle mocks: the true activations of the
/// excerpt a request refers to.
using TruthLookup = std::function<std::vector<double>(const ExcerptRef&)>;

/// Looks refs up in `dumps` by layer. The dumps must outlive the lookup.
TruthLookup truth_lookup(const std::vector<lab::ActivationDump>& dumps);

/// Simulates the true activations exactly (a perfect simulator).
std::unique_ptr<Backend> replay_truth_backend(TruthLookup truth);
/// Simulates the negated true activations.
std::unique_ptr<Backend> negated_backend(TruthLookup truth);
/// Simulates `value` for every token.
std::unique_ptr<Backend> constant_backend(double value);
/// Simulates uniform levels in [0, 10], independent of everything but
/// (seed, neuron, excerpt index).
std::unique_ptr<Backend> noise_backend(std::uint64_t seed);

/// "replay" | "negated" | "constant" | "noise"; throws bad_argument otherwise.
std::unique_ptr<Backend> mock_backend(const std::string& name, std::uint64_t seed,
                                      const std::vector<lab::ActivationDump>& dumps);

}  // namespace crate::interp
