#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "crate/numerics/rng.hpp"

namespace crate::data {

enum class VocabKind { kBytes, kExternal };

struct Vocab {
  VocabKind kind = VocabKind::kBytes;
  std::uint32_t size = 256;

  static Vocab bytes() { return {VocabKind::kBytes, 256}; }
  static Vocab external(std::uint32_t size) { return {VocabKind::kExternal, size}; }
};

struct TokenStream {
  std::vector<std::uint32_t> ids;
  std::string source;
  Vocab vocab;

  std::size_t size() const { return ids.size(); }
};

/// B x T next-token batch; targets[b][t] is the stream successor of inputs[b][t].
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::uint32_t> inputs;   // row-major B x T
  std::vector<std::uint32_t> targets;  // row-major B x T
  std::vector<std::size_t> starts;     // stream offset of each row
};

TokenStream encode_bytes(std::span<const std::uint8_t> text, std::string source = "<memory>");
TokenStream encode_bytes(const std::string& text, std::string source = "<memory>");
TokenStream read_byte_file(const std::filesystem::path& path);

// Pretokenized file: "CRTTOK01", u32 LE vocab size, u64 LE count, count x u32 LE ids.
TokenStream load_pretokenized(const std::filesystem::path& path);
void write_pretokenized(const std::filesystem::path& path, std::span<const std::uint32_t> ids,
                        std::uint32_t vocab_size);

/// Loads either format; `format` is "bytes" or "pretokenized".
TokenStream load_stream(const std::filesystem::path& path, const std::string& format);

/// One window starting at `start`: inputs [start, start+T), targets shifted by one.
TokenBatch make_window_batch(const TokenStream& stream, std::span<const std::size_t> starts,
                             std::size_t seq);

/// B windows at uniform random offsets. Needs stream length > T.
TokenBatch sample_batch(const TokenStream& stream, std::size_t batch, std::size_t seq, Rng& rng);

struct StreamSplit {
  TokenStream train;
  TokenStream validation;
};

/// Contiguous split: the trailing `validation_fraction` of the stream is validation.
StreamSplit split_stream(const TokenStream& stream, double validation_fraction = 0.05);

/// Entropy (nats) of the empirical unigram distribution of the stream.
double unigram_entropy(const TokenStream& stream);

/// Printable rendering of a token for prompts and logs.
std::string render_token(std::uint32_t id, const Vocab& vocab);

}  // namespace crate::data
