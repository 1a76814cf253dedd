#include "crate/data/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <vector>

#include "crate/numerics/rng.hpp"

namespace crate::data {

namespace {

const std::array<const char*, 24> kOnsets = {"b", "c", "d", "f", "g", "h", "j", "k",
                                             "l", "m", "n", "p", "r", "s", "t", "v",
                                             "w", "th", "st", "br", "ch", "sh", "pl", ""};
const std::array<const char*, 8> kVowels = {"a", "e", "i", "o", "u", "ea", "ou", "ai"};
const std::array<const char*, 10> kCodas = {"", "", "n", "r", "s", "t", "l", "nd", "ng", "st"};

std::string make_word(Rng& rng) {
  std::string w;
  const std::size_t syllables = 1 + rng.uniform_int(3);
  for (std::size_t s = 0; s < syllables; ++s) {
    w += kOnsets[rng.uniform_int(kOnsets.size())];
    w += kVowels[rng.uniform_int(kVowels.size())];
    if (s + 1 == syllables) w += kCodas[rng.uniform_int(kCodas.size())];
  }
  return w;
}

}  // namespace

std::string synthetic_text(std::size_t bytes, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::string> lexicon;
  const std::size_t n_words = 3000;
  for (std::size_t i = 0; i < n_words; ++i) lexicon.push_back(make_word(rng));
  // Zipf(1) cumulative weights.
  std::vector<double> cdf(n_words);
  double acc = 0;
  for (std::size_t i = 0; i < n_words; ++i) cdf[i] = (acc += 1.0 / static_cast<double>(i + 1));
  auto draw = [&] {
    const double u = rng.uniform() * acc;
    return lexicon[static_cast<std::size_t>(std::lower_bound(cdf.begin(), cdf.end(), u) -
                                            cdf.begin())];
  };
  std::string text;
  text.reserve(bytes + 64);
  while (text.size() < bytes) {
    const std::size_t sentences = 2 + rng.uniform_int(5);
    for (std::size_t s = 0; s < sentences; ++s) {
      const std::size_t words = 4 + rng.uniform_int(10);
      for (std::size_t w = 0; w < words; ++w) {
        std::string word = draw();
        if (w == 0) word[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(word[0])));
        text += word;
        if (w + 1 < words) text += rng.uniform() < 0.08 ? ", " : " ";
      }
      text += rng.uniform() < 0.1 ? "? " : ". ";
    }
    text += "\n\n";
  }
  text.resize(bytes);
  return text;
}

}  // namespace crate::data
