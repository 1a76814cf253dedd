#pragma once

#include <cstdint>
#include <string>

namespace crate::data {

/// Deterministic English-like text: Zipf-distributed pseudo-words assembled
/// into sentences and paragraphs. Exactly `bytes` long.
std::string synthetic_text(std::size_t bytes, std::uint64_t seed);

}  // namespace crate::data
