#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crate/data/token_stream.hpp"
#include "crate/interp/llm_backend.hpp"
#include "crate/model/config.hpp"
#include "crate/sae/sae.hpp"
#include "crate/train/trainer.hpp"

namespace crate::cli {

struct DataSection {
  std::string path;                // corpus file; empty = synthetic text
  std::string format = "bytes";    // bytes | pretokenized
  std::size_t synthetic_bytes = 1 << 20;
  std::uint64_t synthetic_seed = 0;
};

struct DumpSection {
  std::vector<std::size_t> layers;  // empty = every layer
  std::size_t n_excerpts = 64;      // B_e
  std::size_t excerpt_len = 64;     // T_e
};

struct SaeSection {
  std::size_t layer = 0;
  std::size_t recovery_batches = 8;
  std::size_t recovery_batch = 8;
  std::size_t recovery_seq = 64;
  sae::SaeConfig config;  // remaining keys of the section
};

struct InterpSection {
  std::string metric = "openai_random";
  std::string backend = "noise";  // replay | negated | constant | noise | llm
  std::size_t sample = 0;         // neurons per layer; 0 = all
  std::size_t workers = 1;
  std::size_t hist_bins = 20;
  interp::EndpointConfig endpoint;
};

struct SteerSection {
  std::size_t layer = 0;
  std::size_t neuron = 0;
  double value = 0;
  std::string prompt = "The ";
  std::vector<std::uint32_t> prompt_ids;  // used instead of `prompt` when nonempty
  bool all_positions = false;
  std::size_t top_k = 10;
};

/// Every setting of a CLI run. Sections mirror each module's config type.
struct RunConfig {
  std::uint64_t seed = 0;        // copied into train.seed and sae.seed
  std::string precision = "f32";  // f32 | f64
  DataSection data;
  model::ModelConfig model;
  train::TrainConfig train;
  DumpSection dump;
  SaeSection sae;
  InterpSection interp;
  SteerSection steer;

  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Strict: unknown keys anywhere are rejected with "unknown_key".
void from_json(const nlohmann::json& j, RunConfig& c);

/// Sets the dotted path `assignment` ("train.lr=3e-4") in `doc`. The value is
/// parsed as JSON when it is valid JSON and kept as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Config file (optional) + overrides + seed override, resolved and validated.
RunConfig resolve_config(const std::optional<std::filesystem::path>& file,
                         const std::vector<std::string>& overrides,
                         std::optional<std::uint64_t> seed);

/// The corpus the data section names.
data::TokenStream load_corpus(const DataSection& data);

}  // namespace crate::cli
