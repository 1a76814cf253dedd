#include "crate/lab/excerpts.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace crate::lab {

MetricConfig MetricConfig::named(std::string_view name) {
  MetricConfig m;
  m.name = std::string(name);
  if (name == "openai_tar") {
    m.excerpt_len = 64;
    m.explain = {.top = 5};
    m.simulate = {.top = 5, .random = 5};
  } else if (name == "openai_random") {
    m.excerpt_len = 64;
    m.explain = {.top = 5};
    m.simulate = {.random = 5};
  } else if (name == "anthropic") {
    m.excerpt_len = 8;
    m.explain = {.top = 15, .random = 5, .per_bin = 2, .bins = 11};
    m.simulate = {.top = 10, .random = 5, .per_bin = 2, .bins = 11, .ooc = 10};
  } else {
    throw Error("bad_config", "unknown metric '" + std::string(name) +
                                  "' (expected openai_tar|openai_random|anthropic)");
  }
  return m;
}

std::vector<std::string> MetricConfig::names() {
  return {"openai_tar", "openai_random", "anthropic"};
}

void to_json(nlohmann::json& j, const MetricConfig& m) {
  auto counts = [](const SelectionCounts& c) {
    return nlohmann::json{{"top", c.top},   {"random", c.random}, {"per_bin", c.per_bin},
                          {"bins", c.bins}, {"ooc", c.ooc},       {"total", c.total()}};
  };
  j = {{"name", m.name},
       {"excerpt_len", m.excerpt_len},
       {"ooc_len", m.ooc_len},
       {"explain", counts(m.explain)},
       {"simulate", counts(m.simulate)}};
}

std::string_view kind_name(ExcerptKind kind) {
  switch (kind) {
    case ExcerptKind::kTop: return "top";
    case ExcerptKind::kRandom: return "random";
    case ExcerptKind::kQuantile: return "quantile";
    case ExcerptKind::kOoc: return "ooc";
  }
  return "?";
}

int quantile_bin(float peak, float max, std::size_t bins) {
  if (!(max > 0.0f) || peak <= 0.0f) return 0;
  const auto b = static_cast<std::size_t>(static_cast<double>(peak) / max * static_cast<double>(bins));
  return static_cast<int>(std::min(b, bins - 1));
}

namespace {

struct Candidate {
  std::size_t source;
  std::size_t offset;
  float peak;
  std::size_t peak_pos;  // within the window
};

Excerpt make_excerpt(const ActivationDump& dump, std::size_t neuron, const Candidate& c,
                     std::size_t begin, std::size_t len, ExcerptKind kind) {
  Excerpt e;
  e.kind = kind;
  e.source = c.source;
  e.offset = c.offset + begin;
  e.peak = c.peak;
  for (std::size_t t = e.offset; t < e.offset + len; ++t) {
    e.tokens.push_back(dump.token(c.source, t));
    e.activations.push_back(dump.at(neuron, t, c.source));
  }
  return e;
}

}  // namespace

ExcerptSelection select_excerpts(const ActivationDump& dump, std::size_t neuron,
                                 const MetricConfig& metric, Rng& rng) {
  require(neuron < dump.hidden, "bad_argument", "neuron index out of range");
  const std::size_t len = metric.excerpt_len;
  require(len > 0 && dump.excerpt_len >= len, "bad_argument",
          "dump excerpts (T_e=" + std::to_string(dump.excerpt_len) + ") are shorter than the " +
              metric.name + " excerpt length " + std::to_string(len));
  require(metric.ooc_len > 0 && metric.ooc_len <= len, "bad_config", "ooc length out of range");

  // Candidates in rank order: peak descending, then position.
  std::vector<Candidate> cand;
  const std::size_t per_row = dump.excerpt_len / len;
  for (std::size_t b = 0; b < dump.n_excerpts; ++b)
    for (std::size_t w = 0; w < per_row; ++w) {
      Candidate c{b, w * len, -std::numeric_limits<float>::infinity(), 0};
      for (std::size_t t = 0; t < len; ++t) {
        const float v = dump.at(neuron, c.offset + t, b);
        if (v > c.peak) {
          c.peak = v;
          c.peak_pos = t;
        }
      }
      c.peak = std::max(c.peak, 0.0f);
      cand.push_back(c);
    }
  std::stable_sort(cand.begin(), cand.end(),
                   [](const Candidate& a, const Candidate& b) { return a.peak > b.peak; });
  const std::size_t needed = metric.explain.total() + metric.simulate.total();
  require(cand.size() >= needed, "insufficient_excerpts",
          metric.name + " needs " + std::to_string(needed) + " distinct excerpts, dump has " +
              std::to_string(cand.size()));

  std::vector<bool> used(cand.size(), false);
  std::size_t next_top = 0;
  auto take_top = [&]() -> const Candidate& {
    while (used[next_top]) ++next_top;
    used[next_top] = true;
    return cand[next_top];
  };
  auto unused = [&](auto&& pred) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < cand.size(); ++i)
      if (!used[i] && pred(i)) out.push_back(i);
    return out;
  };

  ExcerptSelection sel;
  for (std::size_t i = 0; i < metric.explain.top; ++i)
    sel.explain.push_back(make_excerpt(dump, neuron, take_top(), 0, len, ExcerptKind::kTop));
  for (std::size_t i = 0; i < metric.simulate.top; ++i)
    sel.simulate.push_back(make_excerpt(dump, neuron, take_top(), 0, len, ExcerptKind::kTop));
  for (std::size_t i = 0; i < metric.simulate.ooc; ++i) {
    const Candidate& c = take_top();
    const std::size_t end = std::max(c.peak_pos + 1, metric.ooc_len);  // window ends at the peak
    sel.simulate.push_back(
        make_excerpt(dump, neuron, c, end - metric.ooc_len, metric.ooc_len, ExcerptKind::kOoc));
  }

  auto draw_random = [&](std::size_t k, std::vector<Excerpt>& out) {
    auto pool = unused([](std::size_t) { return true; });
    for (std::size_t pick : rng.sample_without_replacement(pool.size(), k)) {
      used[pool[pick]] = true;
      out.push_back(make_excerpt(dump, neuron, cand[pool[pick]], 0, len, ExcerptKind::kRandom));
    }
  };
  draw_random(metric.explain.random, sel.explain);
  draw_random(metric.simulate.random, sel.simulate);

  const float max_peak = cand.front().peak;
  auto draw_quantiles = [&](const SelectionCounts& counts, std::vector<Excerpt>& out) {
    if (counts.bins == 0) return;
    const double width = static_cast<double>(max_peak) / static_cast<double>(counts.bins);
    for (std::size_t bin = 0; bin < counts.bins; ++bin) {
      auto in_bin = unused([&](std::size_t i) {
        return quantile_bin(cand[i].peak, max_peak, counts.bins) == static_cast<int>(bin);
      });
      const std::size_t direct = std::min(in_bin.size(), counts.per_bin);
      std::vector<std::size_t> chosen;
      for (std::size_t pick : rng.sample_without_replacement(in_bin.size(), direct))
        chosen.push_back(in_bin[pick]);
      for (std::size_t i : chosen) used[i] = true;
      const double center = (static_cast<double>(bin) + 0.5) * width;
      for (std::size_t k = direct; k < counts.per_bin; ++k) {
        std::size_t best = cand.size();
        for (std::size_t i = 0; i < cand.size(); ++i)
          if (!used[i] && (best == cand.size() || std::abs(cand[i].peak - center) <
                                                      std::abs(cand[best].peak - center)))
            best = i;
        used[best] = true;
        chosen.push_back(best);
      }
      for (std::size_t i : chosen) {
        Excerpt e = make_excerpt(dump, neuron, cand[i], 0, len, ExcerptKind::kQuantile);
        e.bin = quantile_bin(e.peak, max_peak, counts.bins);
        e.target_bin = static_cast<int>(bin);
        out.push_back(std::move(e));
      }
    }
  };
  draw_quantiles(metric.explain, sel.explain);
  draw_quantiles(metric.simulate, sel.simulate);
  return sel;
}

}  // namespace crate::lab
