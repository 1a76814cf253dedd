#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "crate/lab/dump.hpp"
#include "crate/numerics/rng.hpp"

namespace crate::lab {

struct SelectionCounts {
  std::size_t top = 0;
  std::size_t random = 0;
  std::size_t per_bin = 0;  // quantile excerpts drawn from each bin
  std::size_t bins = 0;
  std::size_t ooc = 0;

  std::size_t quantile() const { return per_bin * bins; }
  std::size_t total() const { return top + random + quantile() + ooc; }
};

/// Excerpt retrieval settings of one scoring metric.
struct MetricConfig {
  std::string name;             // openai_tar | openai_random | anthropic
  std::size_t excerpt_len = 0;  // tokens per excerpt
  SelectionCounts explain;
  SelectionCounts simulate;
  std::size_t ooc_len = 3;

  static MetricConfig named(std::string_view name);
  static std::vector<std::string> names();
};

void to_json(nlohmann::json& j, const MetricConfig& m);

enum class ExcerptKind { kTop, kRandom, kQuantile, kOoc };
std::string_view kind_name(ExcerptKind kind);

struct Excerpt {
  ExcerptKind kind = ExcerptKind::kTop;
  std::size_t source = 0;  // dump excerpt index
  std::size_t offset = 0;  // first token within the dump excerpt
  std::vector<std::uint32_t> tokens;
  std::vector<float> activations;  // this neuron, one per token
  float peak = 0;                  // max(0, max activation) of the candidate window
  int bin = -1;                    // quantile bin the peak lies in (quantile kind only)
  int target_bin = -1;             // bin this excerpt was drawn to fill
};

struct ExcerptSelection {
  std::vector<Excerpt> explain;
  std::vector<Excerpt> simulate;
};

/// Quantile bin of `peak` among `bins` even bins over [0, max].
int quantile_bin(float peak, float max, std::size_t bins);

/// Retrieves the explanation and simulation excerpts of one neuron.
///
/// Every dump excerpt is cut into non-overlapping windows of
/// metric.excerpt_len tokens; each window is a candidate ranked by its peak
/// activation (ties by position). Top excerpts are taken in rank order, the
/// explanation set first; random excerpts are uniform draws from the
/// remaining candidates; quantile excerpts are drawn uniformly within each
/// bin, and a bin short of candidates borrows the unused candidate whose peak
/// is nearest the bin center. OOC excerpts are the next top-ranked windows cut
/// to ooc_len tokens ending at the peak. No candidate is used twice, so the
/// two sets are disjoint. Pure function of (dump, neuron, metric, rng state).
ExcerptSelection select_excerpts(const ActivationDump& dump, std::size_t neuron,
                                 const MetricConfig& metric, Rng& rng);

}  // namespace crate::lab
