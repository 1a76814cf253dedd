#include "crate/data/token_stream.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "crate/numerics/binary_io.hpp"
#include "crate/numerics/error.hpp"

namespace crate::data {

namespace {

constexpr char kTokenMagic[8] = {'C', 'R', 'T', 'T', 'O', 'K', '0', '1'};

using io::get_le;
using io::put_le;

}  // namespace

TokenStream encode_bytes(std::span<const std::uint8_t> text, std::string source) {
  require(!text.empty(), "empty_corpus", "corpus is empty: " + source);
  TokenStream stream;
  stream.ids.assign(text.begin(), text.end());
  stream.source = std::move(source);
  stream.vocab = Vocab::bytes();
  return stream;
}

TokenStream encode_bytes(const std::string& text, std::string source) {
  return encode_bytes(std::span<const std::uint8_t>(
                          reinterpret_cast<const std::uint8_t*>(text.data()), text.size()),
                      std::move(source));
}

TokenStream read_byte_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "io_error", "cannot open corpus " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return encode_bytes(bytes, path.string());
}

TokenStream load_pretokenized(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "io_error", "cannot open token file " + path.string());
  char magic[8];
  require(static_cast<bool>(in.read(magic, 8)) && std::memcmp(magic, kTokenMagic, 8) == 0,
          "bad_magic", "not a CRTTOK01 token file: " + path.string());
  std::uint32_t vocab_size = 0;
  std::uint64_t count = 0;
  require(get_le(in, vocab_size) && get_le(in, count), "truncated", "truncated token header");
  require(vocab_size > 0, "bad_vocab", "declared vocabulary size is zero");
  require(count > 0, "empty_corpus", "token file holds no ids: " + path.string());

  TokenStream stream;
  stream.source = path.string();
  stream.vocab = Vocab::external(vocab_size);
  stream.ids.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    require(get_le(in, stream.ids[i]), "truncated",
            "token payload truncated at id " + std::to_string(i) + " of " + std::to_string(count));
    require(stream.ids[i] < vocab_size, "token_out_of_range",
            "token id " + std::to_string(stream.ids[i]) + " >= vocab " + std::to_string(vocab_size));
  }
  return stream;
}

void write_pretokenized(const std::filesystem::path& path, std::span<const std::uint32_t> ids,
                        std::uint32_t vocab_size) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), "io_error", "cannot write " + path.string());
  out.write(kTokenMagic, 8);
  put_le(out, vocab_size);
  put_le(out, static_cast<std::uint64_t>(ids.size()));
  for (auto id : ids) {
    require(id < vocab_size, "token_out_of_range", "id exceeds declared vocabulary");
    put_le(out, id);
  }
}

TokenStream load_stream(const std::filesystem::path& path, const std::string& format) {
  if (format == "bytes") return read_byte_file(path);
  if (format == "pretokenized") return load_pretokenized(path);
  throw Error("bad_config", "unknown corpus format '" + format + "'");
}

TokenBatch make_window_batch(const TokenStream& stream, std::span<const std::size_t> starts,
                             std::size_t seq) {
  TokenBatch batch;
  batch.batch = starts.size();
  batch.seq = seq;
  batch.inputs.reserve(starts.size() * seq);
  batch.targets.reserve(starts.size() * seq);
  for (std::size_t start : starts) {
    require(start + seq < stream.size(), "stream_too_short",
            "window [" + std::to_string(start) + ", +" + std::to_string(seq) +
                "] needs a successor token");
    for (std::size_t t = 0; t < seq; ++t) {
      batch.inputs.push_back(stream.ids[start + t]);
      batch.targets.push_back(stream.ids[start + t + 1]);
    }
    batch.starts.push_back(start);
  }
  return batch;
}

TokenBatch sample_batch(const TokenStream& stream, std::size_t batch, std::size_t seq, Rng& rng) {
  require(seq > 0 && batch > 0, "bad_config", "batch and context must be positive");
  require(stream.size() > seq, "stream_too_short",
          "stream of " + std::to_string(stream.size()) + " tokens cannot fill context " +
              std::to_string(seq));
  const std::size_t span = stream.size() - seq;  // valid starts: [0, n - T - 1]
  std::vector<std::size_t> starts(batch);
  for (auto& s : starts) s = static_cast<std::size_t>(rng.uniform_int(span));
  return make_window_batch(stream, starts, seq);
}

StreamSplit split_stream(const TokenStream& stream, double validation_fraction) {
  require(validation_fraction > 0.0 && validation_fraction < 1.0, "bad_config",
          "validation fraction must be in (0, 1)");
  const auto n = stream.size();
  const auto n_val = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * validation_fraction));
  require(n_val >= 2 && n - n_val >= 2, "stream_too_short", "stream too short to split");
  StreamSplit split;
  split.train.vocab = split.validation.vocab = stream.vocab;
  split.train.source = stream.source + "[train]";
  split.validation.source = stream.source + "[val]";
  split.train.ids.assign(stream.ids.begin(), stream.ids.end() - static_cast<std::ptrdiff_t>(n_val));
  split.validation.ids.assign(stream.ids.end() - static_cast<std::ptrdiff_t>(n_val), stream.ids.end());
  return split;
}

double unigram_entropy(const TokenStream& stream) {
  require(!stream.ids.empty(), "empty_corpus", "entropy of an empty stream");
  std::map<std::uint32_t, std::size_t> counts;
  for (auto id : stream.ids) ++counts[id];
  const double n = static_cast<double>(stream.ids.size());
  double h = 0.0;
  for (const auto& [id, c] : counts) {
    const double p = static_cast<double>(c) / n;
    h -= p * std::log(p);
  }
  return h;
}

std::string render_token(std::uint32_t id, const Vocab& vocab) {
  if (vocab.kind == VocabKind::kBytes && id < 256) {
    switch (id) {
      case '\n': return "\\n";
      case '\t': return "\\t";
      case '\r': return "\\r";
      default: break;
    }
    if (id >= 32 && id < 127) return std::string(1, static_cast<char>(id));
    char buf[8];
    std::snprintf(buf, sizeof(buf), "\\x%02x", id);
    return buf;
  }
  return "<" + std::to_string(id) + ">";
}

}  // namespace crate::data
