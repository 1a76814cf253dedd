#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "crate/data/token_stream.hpp"
#include "support.hpp"

using namespace crate;
using namespace crate::data;

TEST(EncodeBytes, ByteIdentity) {
  auto s = encode_bytes(std::string("AB"));
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s.ids[0], 65u);
  EXPECT_EQ(s.ids[1], 66u);
  EXPECT_EQ(s.vocab.size, 256u);
}

TEST(EncodeBytes, EmptyCorpusIsAnError) {
  try {
    encode_bytes(std::string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "empty_corpus");
  }
}

TEST(EncodeBytes, OneMebibytePreservesLength) {
  auto dir = testkit::temp_dir("bytes");
  const auto text = testkit::synthetic_corpus(1 << 20, 1);
  std::ofstream(dir / "corpus.txt", std::ios::binary) << text;
  auto s = read_byte_file(dir / "corpus.txt");
  EXPECT_EQ(s.size(), 1048576u);
  std::filesystem::remove_all(dir);
}

TEST(Pretokenized, HeaderAndBounds) {
  auto dir = testkit::temp_dir("tok");
  std::vector<std::uint32_t> ids = {0, 1};
  write_pretokenized(dir / "a.bin", ids, 50257);
  auto s = load_pretokenized(dir / "a.bin");
  EXPECT_EQ(s.size(), 2u);
  EXPECT_EQ(s.vocab.size, 50257u);

  // Hand-built file with an out-of-range id: write_pretokenized refuses those.
  std::ofstream bad(dir / "bad.bin", std::ios::binary);
  bad.write("CRTTOK01", 8);
  const unsigned char v[4] = {0x51, 0xC4, 0x00, 0x00};  // 50257
  const unsigned char n[8] = {1, 0, 0, 0, 0, 0, 0, 0};
  bad.write(reinterpret_cast<const char*>(v), 4);
  bad.write(reinterpret_cast<const char*>(n), 8);
  bad.write(reinterpret_cast<const char*>(v), 4);
  bad.close();
  try {
    load_pretokenized(dir / "bad.bin");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "token_out_of_range");
  }
  std::filesystem::remove_all(dir);
}

TEST(Pretokenized, MagicAndTruncation) {
  auto dir = testkit::temp_dir("tok2");
  std::ofstream(dir / "m.bin", std::ios::binary) << "NOTMAGIC........";
  EXPECT_THROW(load_pretokenized(dir / "m.bin"), Error);
  std::vector<std::uint32_t> ids(10, 5);
  write_pretokenized(dir / "t.bin", ids, 256);
  std::filesystem::resize_file(dir / "t.bin", std::filesystem::file_size(dir / "t.bin") - 3);
  try {
    load_pretokenized(dir / "t.bin");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "truncated");
  }
  std::filesystem::remove_all(dir);
}

TEST(Pretokenized, RoundTripTenThousandIds) {
  auto dir = testkit::temp_dir("tok3");
  Rng rng(5);
  std::vector<std::uint32_t> ids(10000);
  for (auto& id : ids) id = static_cast<std::uint32_t>(rng.uniform_int(50257));
  write_pretokenized(dir / "r.bin", ids, 50257);
  EXPECT_EQ(load_pretokenized(dir / "r.bin").ids, ids);
  std::filesystem::remove_all(dir);
}

TEST(SampleBatch, ShiftDefinition) {
  TokenStream s;
  s.ids = {0, 1, 2, 3};
  std::vector<std::size_t> starts = {0};
  auto b = make_window_batch(s, starts, 2);
  EXPECT_EQ(b.inputs, (std::vector<std::uint32_t>{0, 1}));
  EXPECT_EQ(b.targets, (std::vector<std::uint32_t>{1, 2}));
}

TEST(SampleBatch, StreamTooShort) {
  TokenStream s;
  s.ids = {0, 1, 2, 3};
  Rng rng(1);
  try {
    sample_batch(s, 1, 4, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "stream_too_short");
  }
}

TEST(SampleBatch, DeterministicAndShiftInvariantProperty) {
  auto s = encode_bytes(testkit::synthetic_corpus(5000, 2));
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng a(seed), b(seed);
    auto x = sample_batch(s, 4, 16, a);
    auto y = sample_batch(s, 4, 16, b);
    EXPECT_EQ(x.inputs, y.inputs);
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t t = 0; t < 16; ++t) {
        const std::size_t pos = x.starts[r] + t;
        EXPECT_EQ(x.inputs[r * 16 + t], s.ids[pos]);
        EXPECT_EQ(x.targets[r * 16 + t], s.ids[pos + 1]);
      }
  }
}

TEST(Split, TrailingFivePercent) {
  TokenStream s;
  for (std::uint32_t i = 0; i < 1000; ++i) s.ids.push_back(i % 256);
  auto split = split_stream(s);
  EXPECT_EQ(split.train.size(), 950u);
  EXPECT_EQ(split.validation.size(), 50u);
  EXPECT_EQ(split.validation.ids.front(), s.ids[950]);
}

TEST(UnigramEntropy, MatchesDirectCount) {
  const auto text = testkit::synthetic_corpus(20000, 3);
  EXPECT_NEAR(unigram_entropy(encode_bytes(text)), testkit::byte_entropy(text), 1e-12);
  EXPECT_NEAR(unigram_entropy(encode_bytes(std::string("abab"))), std::log(2.0), 1e-15);
}
