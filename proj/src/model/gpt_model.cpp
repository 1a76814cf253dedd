#include "crate/model/gpt_model.hpp"

#include <cmath>

#include "crate/numerics/kernels.hpp"

namespace crate::model {

template <class T>
GptModel<T>::GptModel(ModelConfig config, Rng& rng) : LanguageModel<T>(std::move(config)) {
  const auto& c = this->config_;
  require(c.arch == Arch::kGpt, "bad_config", "GptModel needs arch=gpt");
  const std::size_t d = c.d_model;
  const std::size_t h = c.d_hidden;
  const double proj_std = 0.02 / std::sqrt(2.0 * static_cast<double>(c.n_layer));
  auto& p = this->params_;
  this->register_embeddings(rng);
  for (std::size_t l = 0; l < c.n_layer; ++l) {
    p.add(layer_param(l, "ln1.g"), Tensor<T>({d}, T(1)), false);
    p.add(layer_param(l, "ln1.b"), Tensor<T>({d}, T(0)), false);
    p.add(layer_param(l, "attn.qkv.w"), normal_init<T>({d, 3 * d}, 0.02, rng), true);
    p.add(layer_param(l, "attn.qkv.b"), Tensor<T>({3 * d}, T(0)), false);
    p.add(layer_param(l, "attn.proj.w"), normal_init<T>({d, d}, proj_std, rng), true);
    p.add(layer_param(l, "attn.proj.b"), Tensor<T>({d}, T(0)), false);
    p.add(layer_param(l, "ln2.g"), Tensor<T>({d}, T(1)), false);
    p.add(layer_param(l, "ln2.b"), Tensor<T>({d}, T(0)), false);
    p.add(layer_param(l, "mlp.up.w"), normal_init<T>({d, h}, 0.02, rng), true);
    p.add(layer_param(l, "mlp.up.b"), Tensor<T>({h}, T(0)), false);
    p.add(layer_param(l, "mlp.down.w"), normal_init<T>({h, d}, proj_std, rng), true);
    p.add(layer_param(l, "mlp.down.b"), Tensor<T>({d}, T(0)), false);
  }
  this->register_final_norm();
}

template <class T>
std::unique_ptr<LanguageModel<T>> GptModel<T>::clone() const {
  return std::make_unique<GptModel<T>>(*this);
}

template <class T>
ag::Var GptModel<T>::attention_block(ag::Tape<T>& tape, std::span<const ag::Var> bound,
                                     std::size_t layer, ag::Var z, std::size_t batch,
                                     std::size_t seq, const ForwardOptions<T>& options) const {
  auto at = [&](std::string_view s) { return bound[this->slot(layer_param(layer, s))]; };
  const std::size_t d = this->config_.d_model;
  ag::Var x = ag::layer_norm(tape, z, at("ln1.g"), at("ln1.b"), kLayerNormEps);
  ag::Var qkv = ag::add_row(tape, ag::matmul(tape, x, at("attn.qkv.w")), at("attn.qkv.b"));
  ag::Var q = ag::slice_cols(tape, qkv, 0, d);
  ag::Var k = ag::slice_cols(tape, qkv, d, d);
  ag::Var v = ag::slice_cols(tape, qkv, 2 * d, d);
  ag::Var att = ag::causal_attention(tape, q, k, v, batch, seq, this->config_.n_head);
  ag::Var out = ag::add_row(tape, ag::matmul(tape, att, at("attn.proj.w")), at("attn.proj.b"));
  return ag::add(tape, z, this->maybe_dropout(tape, out, options));
}

template <class T>
ag::Var GptModel<T>::encode(ag::Tape<T>& tape, std::span<const ag::Var> bound, std::size_t layer,
                            ag::Var z_half) const {
  auto at = [&](std::string_view s) { return bound[this->slot(layer_param(layer, s))]; };
  ag::Var x = ag::layer_norm(tape, z_half, at("ln2.g"), at("ln2.b"), kLayerNormEps);
  return ag::gelu(tape, ag::add_row(tape, ag::matmul(tape, x, at("mlp.up.w")), at("mlp.up.b")));
}

template <class T>
ag::Var GptModel<T>::decode(ag::Tape<T>& tape, std::span<const ag::Var> bound, std::size_t layer,
                            ag::Var z_half, ag::Var activations,
                            const ForwardOptions<T>& options) const {
  auto at = [&](std::string_view s) { return bound[this->slot(layer_param(layer, s))]; };
  ag::Var out =
      ag::add_row(tape, ag::matmul(tape, activations, at("mlp.down.w")), at("mlp.down.b"));
  return ag::add(tape, z_half, this->maybe_dropout(tape, out, options));
}

template class GptModel<float>;
template class GptModel<double>;

}  // namespace crate::model
