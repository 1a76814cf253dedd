#include "crate/model/language_model.hpp"

#include "crate/model/crate_model.hpp"
#include "crate/model/gpt_model.hpp"
#include "crate/numerics/kernels.hpp"

namespace crate::model {

std::string layer_param(std::size_t layer, std::string_view suffix) {
  return "h" + std::to_string(layer) + "." + std::string(suffix);
}

template <class T>
Tensor<T> normal_init(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values) v = static_cast<T>(stddev * rng.normal());
  return t;
}

template <class T>
Tensor<T> uniform_init(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values) v = static_cast<T>(bound * (2.0 * rng.uniform() - 1.0));
  return t;
}

template <class T>
LanguageModel<T>::LanguageModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
}

template <class T>
void LanguageModel<T>::register_embeddings(Rng& rng) {
  const std::size_t d = config_.d_model;
  params_.add("wte", normal_init<T>({config_.vocab_size, d}, 0.02, rng), true);
  params_.add("wpe", normal_init<T>({config_.context, d}, 0.02, rng), true);
}

template <class T>
void LanguageModel<T>::register_final_norm() {
  params_.add("ln_f.g", Tensor<T>({config_.d_model}, T(1)), false);
  params_.add("ln_f.b", Tensor<T>({config_.d_model}, T(0)), false);
}

template <class T>
ag::Var LanguageModel<T>::maybe_dropout(ag::Tape<T>& tape, ag::Var x,
                                        const ForwardOptions<T>& options) const {
  if (!options.training || config_.dropout <= 0.0) return x;
  require(options.dropout_rng != nullptr, "bad_argument", "dropout needs an rng");
  return ag::dropout(tape, x, config_.dropout, *options.dropout_rng);
}

template <class T>
ag::Var LanguageModel<T>::embed(ag::Tape<T>& tape, std::span<const ag::Var> bound,
                                std::span<const std::uint32_t> tokens, std::size_t batch,
                                std::size_t seq) const {
  require(tokens.size() == batch * seq && batch > 0 && seq > 0, "bad_shape",
          "token count must equal batch * seq");
  require(seq <= config_.context, "context_overflow",
          "sequence length " + std::to_string(seq) + " exceeds context " +
              std::to_string(config_.context));
  for (auto id : tokens)
    require(id < config_.vocab_size, "token_out_of_range",
            "token id " + std::to_string(id) + " >= vocab size");
  std::vector<std::uint32_t> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i)
    positions[i] = static_cast<std::uint32_t>(i % seq);
  ag::Var tok = ag::embedding(tape, bound[slot("wte")], tokens);
  ag::Var pos = ag::embedding(tape, bound[slot("wpe")], std::span<const std::uint32_t>(positions));
  return ag::add(tape, tok, pos);
}

template <class T>
ag::Var LanguageModel<T>::head(ag::Tape<T>& tape, std::span<const ag::Var> bound, ag::Var z) const {
  ag::Var normed =
      ag::layer_norm(tape, z, bound[slot("ln_f.g")], bound[slot("ln_f.b")], kLayerNormEps);
  return ag::matmul_nt(tape, normed, bound[slot("wte")]);
}

template <class T>
ForwardTrace<T> LanguageModel<T>::forward(ag::Tape<T>& tape, std::span<const ag::Var> bound,
                                          std::span<const std::uint32_t> tokens,
                                          std::size_t batch, std::size_t seq,
                                          const ForwardOptions<T>& options) const {
  require(bound.size() == params_.size(), "bad_argument", "bound parameter count mismatch");
  ForwardTrace<T> trace;
  ag::Var z = maybe_dropout(tape, embed(tape, bound, tokens, batch, seq), options);
  for (std::size_t l = 0; l < config_.n_layer; ++l) {
    if (options.cache) trace.layer_inputs.push_back(z);
    ag::Var z_half = attention_block(tape, bound, l, z, batch, seq, options);
    ag::Var acts = encode(tape, bound, l, z_half);
    if (options.hook) {
      // The patched code enters as a constant: interventions are inference-only.
      Mat<T> patched = tape.value(acts);
      options.hook(l, patched);
      require(patched.rows() == tape.value(acts).rows() &&
                  patched.cols() == tape.value(acts).cols(),
              "bad_shape", "activation hook changed the activation shape");
      acts = tape.leaf(std::move(patched), false);
    }
    if (options.cache) {
      trace.attention_outputs.push_back(z_half);
      trace.activations.push_back(acts);
    }
    z = decode(tape, bound, l, z_half, acts, options);
  }
  trace.logits = head(tape, bound, z);
  return trace;
}

template <class T>
Tensor<T> LanguageModel<T>::logits(std::span<const std::uint32_t> tokens, std::size_t batch,
                                   std::size_t seq, const ActivationHook<T>& hook) const {
  ag::Tape<T> tape(false);
  auto bound = params_.bind(tape, false);
  ForwardOptions<T> options;
  options.hook = hook;
  auto trace = forward(tape, bound, tokens, batch, seq, options);
  return Tensor<T>::from_matrix(tape.value(trace.logits));
}

template <class T>
double LanguageModel<T>::loss(std::span<const std::uint32_t> inputs,
                              std::span<const std::uint32_t> targets, std::size_t batch,
                              std::size_t seq, const ActivationHook<T>& hook) const {
  ag::Tape<T> tape(false);
  auto bound = params_.bind(tape, false);
  ForwardOptions<T> options;
  options.hook = hook;
  auto trace = forward(tape, bound, inputs, batch, seq, options);
  ag::Var l = ag::cross_entropy(tape, trace.logits, targets);
  return static_cast<double>(tape.value(l)(0, 0));
}

template <class T>
std::unique_ptr<LanguageModel<T>> make_model(const ModelConfig& config, Rng& rng) {
  if (config.arch == Arch::kCrate) return std::make_unique<CrateModel<T>>(config, rng);
  return std::make_unique<GptModel<T>>(config, rng);
}

template <class To, class From>
std::unique_ptr<LanguageModel<To>> convert_model(const LanguageModel<From>& model) {
  Rng scratch(0);
  auto out = make_model<To>(model.config(), scratch);
  require(out->params().size() == model.params().size(), "internal",
          "parameter layout differs between precisions");
  for (std::size_t i = 0; i < model.params().size(); ++i)
    out->params()[i].value = model.params()[i].value.template cast<To>();
  return out;
}

template class LanguageModel<float>;
template class LanguageModel<double>;
template std::unique_ptr<LanguageModel<float>> make_model<float>(const ModelConfig&, Rng&);
template std::unique_ptr<LanguageModel<double>> make_model<double>(const ModelConfig&, Rng&);
template std::unique_ptr<LanguageModel<float>> convert_model<float, float>(
    const LanguageModel<float>&);
template std::unique_ptr<LanguageModel<float>> convert_model<float, double>(
    const LanguageModel<double>&);
template std::unique_ptr<LanguageModel<double>> convert_model<double, float>(
    const LanguageModel<float>&);
template std::unique_ptr<LanguageModel<double>> convert_model<double, double>(
    const LanguageModel<double>&);
template Tensor<float> normal_init<float>(Shape, double, Rng&);
template Tensor<double> normal_init<double>(Shape, double, Rng&);
template Tensor<float> uniform_init<float>(Shape, double, Rng&);
template Tensor<double> uniform_init<double>(Shape, double, Rng&);

}  // namespace crate::model
