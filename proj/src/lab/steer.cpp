#include "crate/lab/steer.hpp"

#include <algorithm>
#include <numeric>

#include "crate/numerics/kernels.hpp"

namespace crate::lab {

namespace {

template <class T>
std::vector<double> last_row(const Tensor<T>& logits) {
  const std::size_t v = logits.cols();
  const std::size_t r = logits.rows() - 1;
  std::vector<double> out(v);
  for (std::size_t i = 0; i < v; ++i) out[i] = static_cast<double>(logits.values[r * v + i]);
  return out;
}

std::vector<double> probabilities(const std::vector<double>& logits) {
  Tensor<double> t({1, logits.size()}, logits);
  return softmax_rows(t).values;
}

}  // namespace

template <class T>
SteerResult steer(const model::LanguageModel<T>& model, std::size_t layer, std::size_t neuron,
                  double value, std::span<const std::uint32_t> prompt,
                  const SteerOptions& options) {
  const auto& cfg = model.config();
  require(layer < cfg.n_layer, "bad_argument", "layer out of range");
  require(neuron < cfg.d_hidden, "bad_argument", "neuron out of range");
  require(!prompt.empty(), "bad_argument", "empty prompt");
  const std::size_t seq = prompt.size();

  SteerResult r;
  auto observe = [&](std::size_t l, Mat<T>& a) {
    if (l == layer)
      r.original_activation = static_cast<double>(a(static_cast<Eigen::Index>(seq - 1),
                                                    static_cast<Eigen::Index>(neuron)));
  };
  r.baseline_logits = last_row(model.logits(prompt, 1, seq, observe));

  const T patched = static_cast<T>(value);
  auto patch = [&](std::size_t l, Mat<T>& a) {
    if (l != layer) return;
    const auto col = static_cast<Eigen::Index>(neuron);
    if (options.all_positions)
      a.col(col).setConstant(patched);
    else
      a(static_cast<Eigen::Index>(seq - 1), col) = patched;
  };
  r.steered_logits = last_row(model.logits(prompt, 1, seq, patch));

  r.baseline_probs = probabilities(r.baseline_logits);
  r.steered_probs = probabilities(r.steered_logits);
  std::vector<TokenDelta> deltas(r.steered_logits.size());
  for (std::size_t i = 0; i < deltas.size(); ++i)
    deltas[i] = {static_cast<std::uint32_t>(i), r.steered_probs[i] - r.baseline_probs[i],
                 r.steered_logits[i] - r.baseline_logits[i]};
  std::stable_sort(deltas.begin(), deltas.end(), [](const TokenDelta& a, const TokenDelta& b) {
    return a.prob_delta > b.prob_delta;
  });
  deltas.resize(std::min(options.top_k, deltas.size()));
  r.top = std::move(deltas);
  return r;
}

template SteerResult steer<float>(const model::LanguageModel<float>&, std::size_t, std::size_t,
                                  double, std::span<const std::uint32_t>, const SteerOptions&);
template SteerResult steer<double>(const model::LanguageModel<double>&, std::size_t, std::size_t,
                                   double, std::span<const std::uint32_t>, const SteerOptions&);

}  // namespace crate::lab
