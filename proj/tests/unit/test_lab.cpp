#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <iterator>
#include <set>

#include "crate/lab/dump.hpp"
#include "crate/lab/excerpts.hpp"
#include "crate/lab/steer.hpp"
#include "crate/model/crate_model.hpp"
#include "support.hpp"

using namespace crate;
using namespace crate::lab;
using model::Arch;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

data::TokenStream small_stream() {
  return data::encode_bytes(testkit::synthetic_corpus(3000, 4));
}

std::unique_ptr<model::LanguageModel<float>> byte_model(Arch arch, std::uint64_t seed = 1) {
  Rng rng(seed);
  return model::make_model<float>(testkit::tiny_config(arch, 16, 2, 2, 256, 32), rng);
}

// Dump filled by a generator over (neuron, token, excerpt).
template <class F>
ActivationDump synthetic_dump(std::size_t h, std::size_t te, std::size_t be, const char* arch,
                              F&& value) {
  ActivationDump d;
  d.model_id = "synthetic";
  d.arch = arch;
  d.hidden = h;
  d.excerpt_len = te;
  d.n_excerpts = be;
  d.activations.resize(h * te * be);
  for (std::size_t n = 0; n < h; ++n)
    for (std::size_t t = 0; t < te; ++t)
      for (std::size_t b = 0; b < be; ++b)
        d.activations[(n * te + t) * be + b] = static_cast<float>(value(n, t, b));
  for (std::size_t i = 0; i < te * be; ++i) d.tokens.push_back(static_cast<std::uint32_t>(i % 256));
  return d;
}

ActivationDump random_dump(std::size_t h, std::size_t te, std::size_t be, std::uint64_t seed) {
  Rng rng(seed);
  return synthetic_dump(h, te, be, "crate", [&](auto, auto, auto) {
    const double u = rng.uniform();
    return u < 0.6 ? 0.0 : rng.uniform() * 3.0;
  });
}

}  // namespace

TEST(Dump, ShapeContractAndNonnegativity) {
  auto dir = testkit::temp_dir("dump");
  auto m = byte_model(Arch::kCrate);
  Rng rng(3);
  auto paths = dump_activations(*m, small_stream(), {0, 1}, 2, 8, rng, dir, "toy");
  ASSERT_EQ(paths.size(), 2u);
  for (std::size_t l = 0; l < 2; ++l) {
    auto d = read_dump(paths[l]);
    EXPECT_EQ(d.layer, l);
    EXPECT_EQ(d.hidden, 64u);
    EXPECT_EQ(d.excerpt_len, 8u);
    EXPECT_EQ(d.n_excerpts, 2u);
    EXPECT_EQ(d.activations.size(), 64u * 8 * 2);
    EXPECT_GE(*std::min_element(d.activations.begin(), d.activations.end()), 0.0f);
  }
  std::filesystem::remove_all(dir);
}

TEST(Dump, SameSeedGivesIdenticalFiles) {
  auto dir = testkit::temp_dir("dump2");
  auto m = byte_model(Arch::kGpt);
  auto s = small_stream();
  Rng a(9), b(9);
  auto p1 = dump_activations(*m, s, {0}, 20, 16, a, dir / "a", "toy");
  auto p2 = dump_activations(*m, s, {0}, 20, 16, b, dir / "b", "toy");
  EXPECT_EQ(slurp(p1[0]), slurp(p2[0]));
  std::filesystem::remove_all(dir);
}

TEST(Dump, MatchesSingleExcerptForward) {
  auto m = byte_model(Arch::kCrate, 5);
  Rng rng(4);
  auto dumps = collect_activations(*m, small_stream(), {1}, 3, 8, rng, "toy");
  const auto& d = dumps[0];
  for (std::size_t b = 0; b < 3; ++b) {
    std::vector<std::uint32_t> toks(d.tokens.begin() + b * 8, d.tokens.begin() + (b + 1) * 8);
    Mat<float> captured;
    (void)m->logits(toks, 1, 8, [&](std::size_t l, Mat<float>& a) {
      if (l == 1) captured = a;
    });
    for (std::size_t t = 0; t < 8; ++t)
      for (std::size_t n = 0; n < d.hidden; ++n)
        EXPECT_NEAR(d.at(n, t, b), captured(t, n), 1e-5f);
  }
}

TEST(Dump, FileRoundTripAndCorruption) {
  auto dir = testkit::temp_dir("dump3");
  auto d = random_dump(3, 4, 5, 1);
  d.layer = 2;
  write_dump(dir / "x.act", d);
  auto back = read_dump(dir / "x.act");
  EXPECT_EQ(back.activations, d.activations);
  EXPECT_EQ(back.tokens, d.tokens);
  EXPECT_EQ(back.layer, 2u);
  EXPECT_EQ(slurp(dir / "x.act").substr(0, 8), "CRTACT01");

  std::filesystem::resize_file(dir / "x.act", std::filesystem::file_size(dir / "x.act") - 2);
  try {
    read_dump(dir / "x.act");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "truncated");
  }
  d.activations[0] = -1.0f;
  EXPECT_THROW(write_dump(dir / "neg.act", d), Error);
  std::filesystem::remove_all(dir);
}

TEST(Dump, ScoringSkipsLastLayer) {
  EXPECT_EQ(scored_layers(3), (std::vector<std::size_t>{0, 1}));
  EXPECT_TRUE(scored_layers(1).empty());
}

TEST(Sparsity, AllZeroAndDenseGaussian) {
  auto zeros = synthetic_dump(4, 4, 4, "crate", [](auto, auto, auto) { return 0.0; });
  EXPECT_EQ(zero_fraction(zeros), 1.0);
  Rng rng(2);
  auto dense = synthetic_dump(16, 16, 16, "gpt", [&](auto, auto, auto) { return rng.normal(); });
  EXPECT_LT(zero_fraction(dense), 0.001);
  auto rows = sparsity_report({zeros, dense});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].zero_fraction, 1.0);
  EXPECT_EQ(rows[1].entries, 16u * 16 * 16);
}

TEST(Sparsity, ThresholdIsInclusive) {
  std::vector<float> v = {1e-6f, -1e-6f, 2e-6f, 0.0f};
  EXPECT_DOUBLE_EQ(zero_fraction(v), 0.75);
}

TEST(Sparsity, FirstStageZerosGrowWithLambda) {
  Rng rng(8);
  auto z = testkit::random_tensor({12, 16}, 1.0, rng);
  auto dict = testkit::random_tensor({16, 64}, 0.3, rng);
  Tensor<double> g({16}, 1.0), b({16}, 0.0);
  double previous = -1;
  for (double lambda : {0.0, 0.05, 0.1, 0.2, 0.5, 1.0, 5.0}) {
    auto r = model::ista_forward(z, dict, 0.1, lambda, 2, g, b);
    std::vector<float> a1(r.stages[0].values.begin(), r.stages[0].values.end());
    const double frac = zero_fraction(a1);
    EXPECT_GE(frac, previous) << "lambda " << lambda;
    previous = frac;
  }
  EXPECT_EQ(previous, 1.0);
}

TEST(MetricTable, CountsPerMetric) {
  auto tar = MetricConfig::named("openai_tar");
  EXPECT_EQ(tar.excerpt_len, 64u);
  EXPECT_EQ(tar.explain.total(), 5u);
  EXPECT_EQ(tar.simulate.top, 5u);
  EXPECT_EQ(tar.simulate.random, 5u);
  auto rnd = MetricConfig::named("openai_random");
  EXPECT_EQ(rnd.explain.top, 5u);
  EXPECT_EQ(rnd.simulate.total(), 5u);
  EXPECT_EQ(rnd.simulate.random, 5u);
  auto an = MetricConfig::named("anthropic");
  EXPECT_EQ(an.excerpt_len, 8u);
  EXPECT_EQ(an.explain.total(), 42u);
  EXPECT_EQ(an.simulate.total(), 47u);
  EXPECT_EQ(an.ooc_len, 3u);
  EXPECT_THROW(MetricConfig::named("bogus"), Error);
}

TEST(SelectExcerpts, ExactCountsForEveryMetric) {
  auto d = random_dump(3, 64, 120, 11);
  for (const auto& name : MetricConfig::names()) {
    auto m = MetricConfig::named(name);
    Rng rng(1);
    auto sel = select_excerpts(d, 1, m, rng);
    auto count = [](const std::vector<Excerpt>& v, ExcerptKind k) {
      return static_cast<std::size_t>(
          std::count_if(v.begin(), v.end(), [&](const Excerpt& e) { return e.kind == k; }));
    };
    EXPECT_EQ(sel.explain.size(), m.explain.total()) << name;
    EXPECT_EQ(sel.simulate.size(), m.simulate.total()) << name;
    EXPECT_EQ(count(sel.explain, ExcerptKind::kTop), m.explain.top);
    EXPECT_EQ(count(sel.explain, ExcerptKind::kRandom), m.explain.random);
    EXPECT_EQ(count(sel.explain, ExcerptKind::kQuantile), m.explain.quantile());
    EXPECT_EQ(count(sel.simulate, ExcerptKind::kTop), m.simulate.top);
    EXPECT_EQ(count(sel.simulate, ExcerptKind::kRandom), m.simulate.random);
    EXPECT_EQ(count(sel.simulate, ExcerptKind::kQuantile), m.simulate.quantile());
    EXPECT_EQ(count(sel.simulate, ExcerptKind::kOoc), m.simulate.ooc);
    for (const auto* set : {&sel.explain, &sel.simulate})
      for (const auto& e : *set) {
        const std::size_t want = e.kind == ExcerptKind::kOoc ? 3 : m.excerpt_len;
        EXPECT_EQ(e.tokens.size(), want);
        EXPECT_EQ(e.activations.size(), want);
      }
  }
}

TEST(SelectExcerpts, SetsAreDisjoint) {
  auto d = random_dump(2, 16, 60, 12);
  auto m = MetricConfig::named("anthropic");
  Rng rng(3);
  auto sel = select_excerpts(d, 0, m, rng);
  std::set<std::pair<std::size_t, std::size_t>> windows;
  for (const auto* set : {&sel.explain, &sel.simulate})
    for (const auto& e : *set) {
      const std::size_t window = e.offset / m.excerpt_len;
      EXPECT_TRUE(windows.insert({e.source, window}).second);
    }
}

TEST(SelectExcerpts, QuantileBinsPartitionAndPeaksLieInClaimedBin) {
  const float max = 2.2f;
  EXPECT_EQ(quantile_bin(0.0f, max, 11), 0);
  EXPECT_EQ(quantile_bin(max, max, 11), 10);
  for (int i = 0; i <= 1100; ++i) {
    const float p = max * static_cast<float>(i) / 1100.0f;
    const int b = quantile_bin(p, max, 11);
    EXPECT_GE(b, 0);
    EXPECT_LE(b, 10);
    EXPECT_LE(static_cast<double>(b) * max / 11 - 1e-6, p);
  }
  // Skewed neuron: most bins are empty, so borrowing kicks in.
  auto d = synthetic_dump(1, 8, 200, "crate",
                          [](auto, std::size_t t, std::size_t b) { return b == 7 && t == 3 ? 10.0 : 0.01 * (b % 3); });
  auto m = MetricConfig::named("anthropic");
  Rng rng(5);
  auto sel = select_excerpts(d, 0, m, rng);
  const float top = 10.0f;
  for (const auto* set : {&sel.explain, &sel.simulate})
    for (const auto& e : *set) {
      if (e.kind != ExcerptKind::kQuantile) continue;
      EXPECT_EQ(e.bin, quantile_bin(e.peak, top, 11));
      EXPECT_GE(e.target_bin, 0);
      const float peak = std::max(0.0f, *std::max_element(e.activations.begin(), e.activations.end()));
      EXPECT_EQ(peak, e.peak);
    }
}

TEST(SelectExcerpts, DominantExcerptIsTopOne) {
  auto d = synthetic_dump(2, 64, 30, "gpt", [](std::size_t n, std::size_t t, std::size_t b) {
    return (b == 17 && t == 40 && n == 1) ? 50.0 : -0.5 + 0.001 * static_cast<double>(t);
  });
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    auto sel = select_excerpts(d, 1, MetricConfig::named("openai_tar"), rng);
    EXPECT_EQ(sel.explain.front().source, 17u);
    EXPECT_EQ(sel.explain.front().peak, 50.0f);
  }
}

TEST(SelectExcerpts, OocWindowEndsAtPeak) {
  auto d = synthetic_dump(1, 8, 100, "crate", [](auto, std::size_t t, std::size_t b) {
    return t == b % 8 ? 1.0 + 0.01 * static_cast<double>(b) : 0.0;
  });
  Rng rng(2);
  auto sel = select_excerpts(d, 0, MetricConfig::named("anthropic"), rng);
  for (const auto& e : sel.simulate) {
    if (e.kind != ExcerptKind::kOoc) continue;
    ASSERT_EQ(e.tokens.size(), 3u);
    const std::size_t peak_pos = e.source % 8;
    EXPECT_EQ(e.offset, peak_pos >= 2 ? peak_pos - 2 : 0);
    EXPECT_EQ(e.peak, *std::max_element(e.activations.begin(), e.activations.end()));
  }
}

TEST(SelectExcerpts, PureFunctionOfSeed) {
  auto d = random_dump(2, 8, 150, 13);
  auto m = MetricConfig::named("anthropic");
  Rng a(77), b(77), c(78);
  auto x = select_excerpts(d, 1, m, a);
  auto y = select_excerpts(d, 1, m, b);
  auto z = select_excerpts(d, 1, m, c);
  auto key = [](const ExcerptSelection& s) {
    std::vector<std::size_t> k;
    for (const auto& e : s.simulate) k.push_back(e.source * 1000 + e.offset);
    return k;
  };
  EXPECT_EQ(key(x), key(y));
  EXPECT_NE(key(x), key(z));
}

TEST(SelectExcerpts, InsufficientOrShortDumpIsAnError) {
  auto d = random_dump(1, 8, 20, 14);
  Rng rng(1);
  try {
    select_excerpts(d, 0, MetricConfig::named("anthropic"), rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "insufficient_excerpts");
  }
  EXPECT_THROW(select_excerpts(d, 0, MetricConfig::named("openai_tar"), rng), Error);
  EXPECT_THROW(select_excerpts(d, 5, MetricConfig::named("anthropic"), rng), Error);
}

class SteerBoth : public ::testing::TestWithParam<Arch> {};

TEST_P(SteerBoth, ExistingValueIsANoOp) {
  auto m = byte_model(GetParam(), 21);
  std::vector<std::uint32_t> prompt = {72, 101, 108, 108, 111};
  auto base = steer(*m, 0, 3, 0.0, prompt);
  auto r = steer(*m, 0, 3, base.original_activation, prompt);
  for (const auto& t : r.top) EXPECT_EQ(t.prob_delta, 0.0);
  EXPECT_EQ(r.steered_logits, r.baseline_logits);
}

TEST_P(SteerBoth, MatchesIndependentPatchedForwardBitwise) {
  auto m = byte_model(GetParam(), 22);
  std::vector<std::uint32_t> prompt = {10, 20, 30, 40, 50, 60};
  for (bool all : {false, true}) {
    for (std::size_t layer = 0; layer < 2; ++layer) {
      SteerOptions opts;
      opts.all_positions = all;
      auto r = steer(*m, layer, 7, 2.5, prompt, opts);
      auto oracle = testkit::patched_forward<float>(*m, prompt, layer, [&](Mat<float>& a) {
        if (all)
          a.col(7).setConstant(2.5f);
        else
          a(5, 7) = 2.5f;
      });
      for (std::size_t v = 0; v < 256; ++v)
        EXPECT_EQ(r.steered_logits[v], static_cast<double>(oracle.values[5 * 256 + v]));
      auto plain = testkit::patched_forward<float>(*m, prompt, layer, [](Mat<float>&) {});
      for (std::size_t v = 0; v < 256; ++v)
        EXPECT_EQ(r.baseline_logits[v], static_cast<double>(plain.values[5 * 256 + v]));
    }
  }
}

TEST_P(SteerBoth, TopDeltasAreRankedAndConsistent) {
  auto m = byte_model(GetParam(), 23);
  std::vector<std::uint32_t> prompt = {1, 2, 3};
  SteerOptions opts;
  opts.top_k = 5;
  auto r = steer(*m, 1, 0, 8.0, prompt, opts);
  ASSERT_EQ(r.top.size(), 5u);
  for (std::size_t i = 0; i + 1 < r.top.size(); ++i) EXPECT_GE(r.top[i].prob_delta, r.top[i + 1].prob_delta);
  for (const auto& t : r.top) {
    EXPECT_EQ(t.prob_delta, r.steered_probs[t.token] - r.baseline_probs[t.token]);
    EXPECT_EQ(t.logit_delta, r.steered_logits[t.token] - r.baseline_logits[t.token]);
  }
}

TEST_P(SteerBoth, OutOfRangeIndices) {
  auto m = byte_model(GetParam());
  std::vector<std::uint32_t> prompt = {1};
  EXPECT_THROW(steer(*m, 2, 0, 1.0, prompt), Error);
  EXPECT_THROW(steer(*m, 0, 64, 1.0, prompt), Error);
}

INSTANTIATE_TEST_SUITE_P(Arch, SteerBoth, ::testing::Values(Arch::kCrate, Arch::kGpt),
                         [](const auto& info) { return std::string(model::arch_name(info.param)); });

TEST(Steer, ZeroOnZeroNeuronGivesZeroDeltas) {
  auto m = byte_model(Arch::kCrate, 24);
  std::vector<std::uint32_t> prompt = {5, 6, 7, 8};
  // Find a neuron that is exactly zero at the last position.
  std::size_t neuron = 0;
  for (; neuron < 64; ++neuron)
    if (steer(*m, 0, neuron, 0.0, prompt).original_activation == 0.0) break;
  ASSERT_LT(neuron, 64u) << "no zero neuron at the final position";
  auto r = steer(*m, 0, neuron, 0.0, prompt);
  for (const auto& t : r.top) {
    EXPECT_EQ(t.prob_delta, 0.0);
    EXPECT_EQ(t.logit_delta, 0.0);
  }
}
