#include "crate/model/crate_model.hpp"

#include <cmath>

#include "crate/numerics/kernels.hpp"

namespace crate::model {

template <class T>
ag::Var ista_code(ag::Tape<T>& tape, ag::Var x, ag::Var dict, T eta, T lambda, std::size_t iters,
                  std::vector<ag::Var>* stages) {
  require(iters >= 1, "bad_config", "ista needs at least one iteration");
  const T shift = -eta * lambda;
  // A_0 = 0, so the first step reduces to a thresholded correlation.
  ag::Var a = ag::relu(tape, ag::add_scalar(tape, ag::scale(tape, ag::matmul(tape, x, dict), eta),
                                            shift));
  if (stages) stages->push_back(a);
  for (std::size_t k = 1; k < iters; ++k) {
    ag::Var residual = ag::sub(tape, ag::matmul_nt(tape, a, dict), x);
    ag::Var step = ag::scale(tape, ag::matmul(tape, residual, dict), eta);
    a = ag::relu(tape, ag::add_scalar(tape, ag::sub(tape, a, step), shift));
    if (stages) stages->push_back(a);
  }
  return a;
}

template <class T>
IstaResult<T> ista_forward(const Tensor<T>& z_half, const Tensor<T>& dict, double eta,
                           double lambda, std::size_t iters, const Tensor<T>& gamma,
                           const Tensor<T>& beta) {
  require(z_half.cols() == dict.rows(), "bad_shape", "ista: width of Z and rows of D differ");
  ag::Tape<T> tape(false);
  ag::Var z = tape.leaf(Mat<T>(z_half.matrix()));
  ag::Var d = tape.leaf(Mat<T>(dict.matrix()));
  ag::Var x = ag::layer_norm(tape, z, tape.leaf(Mat<T>(gamma.matrix())),
                             tape.leaf(Mat<T>(beta.matrix())), kLayerNormEps);
  std::vector<ag::Var> stages;
  ag::Var a = ista_code(tape, x, d, static_cast<T>(eta), static_cast<T>(lambda), iters, &stages);
  IstaResult<T> result;
  result.code = Tensor<T>::from_matrix(tape.value(a));
  result.output = Tensor<T>::from_matrix(tape.value(ag::matmul_nt(tape, a, d)));
  for (ag::Var s : stages) result.stages.push_back(Tensor<T>::from_matrix(tape.value(s)));
  return result;
}

template <class T>
ag::Var mssa(ag::Tape<T>& tape, ag::Var z, ag::Var gamma, ag::Var beta, ag::Var u,
             ag::Var proj_w, ag::Var proj_b, std::size_t batch, std::size_t seq,
             std::size_t heads) {
  ag::Var qkv = ag::matmul(tape, ag::layer_norm(tape, z, gamma, beta, kLayerNormEps), u);
  ag::Var att = ag::causal_attention(tape, qkv, qkv, qkv, batch, seq, heads);
  ag::Var out = ag::add_row(tape, ag::matmul(tape, att, proj_w), proj_b);
  return ag::add(tape, z, out);
}

template <class T>
CrateModel<T>::CrateModel(ModelConfig config, Rng& rng) : LanguageModel<T>(std::move(config)) {
  const auto& c = this->config_;
  require(c.arch == Arch::kCrate, "bad_config", "CrateModel needs arch=crate");
  const std::size_t d = c.d_model;
  const double proj_std = 0.02 / std::sqrt(2.0 * static_cast<double>(c.n_layer));
  auto& p = this->params_;
  this->register_embeddings(rng);
  for (std::size_t l = 0; l < c.n_layer; ++l) {
    p.add(layer_param(l, "ln1.g"), Tensor<T>({d}, T(1)), false);
    p.add(layer_param(l, "ln1.b"), Tensor<T>({d}, T(0)), false);
    p.add(layer_param(l, "attn.U"), normal_init<T>({d, d}, 0.02, rng), true);
    p.add(layer_param(l, "attn.proj.w"), normal_init<T>({d, d}, proj_std, rng), true);
    p.add(layer_param(l, "attn.proj.b"), Tensor<T>({d}, T(0)), false);
    p.add(layer_param(l, "ln2.g"), Tensor<T>({d}, T(1)), false);
    p.add(layer_param(l, "ln2.b"), Tensor<T>({d}, T(0)), false);
    // Kaiming-uniform with gain sqrt(2) and fan-in d.
    p.add(layer_param(l, "ista.D"),
          uniform_init<T>({d, c.d_hidden}, std::sqrt(6.0 / static_cast<double>(d)), rng), true);
  }
  this->register_final_norm();
}

template <class T>
std::unique_ptr<LanguageModel<T>> CrateModel<T>::clone() const {
  return std::make_unique<CrateModel<T>>(*this);
}

template <class T>
ag::Var CrateModel<T>::attention_block(ag::Tape<T>& tape, std::span<const ag::Var> bound,
                                       std::size_t layer, ag::Var z, std::size_t batch,
                                       std::size_t seq, const ForwardOptions<T>& options) const {
  auto at = [&](std::string_view s) { return bound[this->slot(layer_param(layer, s))]; };
  ag::Var qkv = ag::matmul(tape, ag::layer_norm(tape, z, at("ln1.g"), at("ln1.b"), kLayerNormEps),
                           at("attn.U"));
  ag::Var att = ag::causal_attention(tape, qkv, qkv, qkv, batch, seq, this->config_.n_head);
  ag::Var out = ag::add_row(tape, ag::matmul(tape, att, at("attn.proj.w")), at("attn.proj.b"));
  return ag::add(tape, z, this->maybe_dropout(tape, out, options));
}

template <class T>
ag::Var CrateModel<T>::encode_stages(ag::Tape<T>& tape, std::span<const ag::Var> bound,
                                     std::size_t layer, ag::Var z_half,
                                     std::vector<ag::Var>* stages) const {
  auto at = [&](std::string_view s) { return bound[this->slot(layer_param(layer, s))]; };
  const auto& c = this->config_;
  ag::Var x = ag::layer_norm(tape, z_half, at("ln2.g"), at("ln2.b"), kLayerNormEps);
  return ista_code(tape, x, at("ista.D"), static_cast<T>(c.ista_step),
                   static_cast<T>(c.ista_lambda), c.ista_iters, stages);
}

template <class T>
ag::Var CrateModel<T>::encode(ag::Tape<T>& tape, std::span<const ag::Var> bound,
                              std::size_t layer, ag::Var z_half) const {
  return encode_stages(tape, bound, layer, z_half, nullptr);
}

template <class T>
ag::Var CrateModel<T>::decode(ag::Tape<T>& tape, std::span<const ag::Var> bound,
                              std::size_t layer, ag::Var /*z_half*/, ag::Var activations,
                              const ForwardOptions<T>& options) const {
  // Z^{l+1} = D A_t; the skip connection lives inside the ISTA recursion.
  ag::Var out =
      ag::matmul_nt(tape, activations, bound[this->slot(layer_param(layer, "ista.D"))]);
  return this->maybe_dropout(tape, out, options);
}

template <class T>
Tensor<T> CrateModel<T>::mssa_forward(std::size_t layer, const Tensor<T>& z) const {
  require(layer < this->config_.n_layer, "bad_argument", "layer out of range");
  ag::Tape<T> tape(false);
  auto bound = this->params_.bind(tape, false);
  ag::Var zv = tape.leaf(Mat<T>(z.matrix()));
  ag::Var out = attention_block(tape, bound, layer, zv, 1, z.rows(), {});
  return Tensor<T>::from_matrix(tape.value(out));
}

template <class T>
IstaResult<T> CrateModel<T>::ista_forward(std::size_t layer, const Tensor<T>& z_half) const {
  require(layer < this->config_.n_layer, "bad_argument", "layer out of range");
  ag::Tape<T> tape(false);
  auto bound = this->params_.bind(tape, false);
  ag::Var zv = tape.leaf(Mat<T>(z_half.matrix()));
  std::vector<ag::Var> stages;
  ag::Var a = encode_stages(tape, bound, layer, zv, &stages);
  IstaResult<T> result;
  result.code = Tensor<T>::from_matrix(tape.value(a));
  result.output = Tensor<T>::from_matrix(tape.value(decode(tape, bound, layer, zv, a, {})));
  for (ag::Var s : stages) result.stages.push_back(Tensor<T>::from_matrix(tape.value(s)));
  return result;
}

#define CRATE_INSTANTIATE(T)                                                                   \
  template ag::Var ista_code<T>(ag::Tape<T>&, ag::Var, ag::Var, T, T, std::size_t,             \
                                std::vector<ag::Var>*);                                        \
  template IstaResult<T> ista_forward<T>(const Tensor<T>&, const Tensor<T>&, double, double,   \
                                         std::size_t, const Tensor<T>&, const Tensor<T>&);     \
  template ag::Var mssa<T>(ag::Tape<T>&, ag::Var, ag::Var, ag::Var, ag::Var, ag::Var, ag::Var, \
                           std::size_t, std::size_t, std::size_t);                             \
  template class CrateModel<T>;

CRATE_INSTANTIATE(float)
CRATE_INSTANTIATE(double)
#undef CRATE_INSTANTIATE

}  // namespace crate::model
