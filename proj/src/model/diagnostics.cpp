#include "crate/model/diagnostics.hpp"

#include <cmath>
#include <cstring>
#include <string>

namespace crate::model {

namespace {

double half_logdet_identity_plus(const Mat<double>& gram, double alpha) {
  Mat<double> m = alpha * gram;
  m.diagonal().array() += 1.0;
  Eigen::LLT<Mat<double>> llt(m);
  require(llt.info() == Eigen::Success, "non_finite", "coding rate: matrix not positive definite");
  double half = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i) half += std::log(llt.matrixL()(i, i));
  require(std::isfinite(half), "non_finite", "coding rate: non-finite logdet");
  return half;  // 1/2 * 2 * sum(log diag L)
}

double rate_of(const Mat<double>& z, double scale_dim, double eps) {
  const double n = static_cast<double>(z.rows());
  const double alpha = scale_dim / (n * eps * eps);
  if (z.rows() <= z.cols()) return half_logdet_identity_plus(z * z.transpose(), alpha);
  return half_logdet_identity_plus(z.transpose() * z, alpha);
}

}  // namespace

double coding_rate(const Tensor<double>& z, double eps) {
  require(eps > 0, "bad_argument", "eps must be positive");
  require(z.all_finite(), "non_finite", "coding rate of a non-finite matrix");
  Mat<double> m = z.matrix();
  return rate_of(m, static_cast<double>(m.cols()), eps);
}

double coding_rate_subspaces(const Tensor<double>& z, const Tensor<double>& u, std::size_t heads,
                             double eps) {
  require(eps > 0, "bad_argument", "eps must be positive");
  require(u.rows() == z.cols() && heads > 0 && u.cols() % heads == 0, "bad_shape",
          "subspace bases must be d x d with d divisible by the head count");
  const std::size_t p = u.cols() / heads;
  Mat<double> zu = z.matrix() * u.matrix();
  double total = 0;
  for (std::size_t k = 0; k < heads; ++k)
    total += rate_of(zu.middleCols(k * p, p), static_cast<double>(p), eps);
  return total;
}

template <class T>
std::vector<LayerDiagnostics> layer_diagnostics(const LanguageModel<T>& model,
                                                std::span<const std::uint32_t> tokens) {
  const auto& c = model.config();
  ag::Tape<T> tape(false);
  auto bound = model.params().bind(tape, false);
  ForwardOptions<T> options;
  options.cache = true;
  auto trace = model.forward(tape, bound, tokens, 1, tokens.size(), options);
  std::vector<LayerDiagnostics> out;
  for (std::size_t l = 0; l < c.n_layer; ++l) {
    LayerDiagnostics diag;
    diag.layer = l;
    Tensor<double> z = Tensor<T>::from_matrix(tape.value(trace.attention_outputs[l])).template cast<double>();
    Tensor<double> u;
    if (c.arch == Arch::kCrate) {
      u = model.params().at(layer_param(l, "attn.U")).template cast<double>();
    } else {
      const auto& qkv = model.params().at(layer_param(l, "attn.qkv.w"));
      Mat<double> q = qkv.matrix().leftCols(c.d_model).template cast<double>();
      u = Tensor<double>::from_matrix(q);
    }
    diag.rate = coding_rate(z, c.rate_eps);
    diag.rate_subspace = coding_rate_subspaces(z, u, c.n_head, c.rate_eps);
    const Mat<T>& a = tape.value(trace.activations[l]);
    diag.total = static_cast<std::size_t>(a.size());
    for (Eigen::Index i = 0; i < a.size(); ++i)
      if (std::abs(static_cast<double>(a.data()[i])) > 1e-6) ++diag.nonzero;
    out.push_back(diag);
  }
  return out;
}

template std::vector<LayerDiagnostics> layer_diagnostics<float>(const LanguageModel<float>&,
                                                                std::span<const std::uint32_t>);
template std::vector<LayerDiagnostics> layer_diagnostics<double>(const LanguageModel<double>&,
                                                                 std::span<const std::uint32_t>);

bool causality_trial(Rng& rng, std::string* description) {
  static const std::size_t widths[] = {8, 16, 32, 64};
  const auto arch = rng.uniform() < 0.5 ? Arch::kCrate : Arch::kGpt;
  const std::size_t d = widths[rng.uniform_int(4)];
  std::size_t heads = std::size_t{1} << rng.uniform_int(3);  // 1, 2, 4
  while (d % heads) heads /= 2;
  const std::size_t layers = 1 + rng.uniform_int(3);
  const std::size_t vocab = 5 + rng.uniform_int(60);
  const std::size_t seq = 2 + rng.uniform_int(15);
  ModelConfig config;
  config.arch = arch;
  config.d_model = d;
  config.n_head = heads;
  config.n_layer = layers;
  config.d_hidden = 4 * d;
  config.vocab_size = vocab;
  config.context = 16;
  Rng init = rng.fork(rng.next_u64());
  auto net = make_model<double>(config, init);
  // Wider weights make the comparison sensitive to any leak.
  for (auto& p : net->params())
    for (auto& v : p.value.values) v += 0.2 * init.normal();
  std::vector<std::uint32_t> tokens(seq);
  for (auto& t : tokens) t = static_cast<std::uint32_t>(rng.uniform_int(vocab));
  const std::size_t s = 1 + rng.uniform_int(seq - 1);
  auto perturbed = tokens;
  for (std::size_t i = s; i < seq; ++i)
    perturbed[i] = static_cast<std::uint32_t>((tokens[i] + 1 + rng.uniform_int(vocab - 1)) % vocab);
  if (description)
    *description = std::string(arch_name(arch)) + " d=" + std::to_string(d) +
                   " K=" + std::to_string(heads) + " L=" + std::to_string(layers) +
                   " T=" + std::to_string(seq) + " s=" + std::to_string(s);
  const auto a = net->logits(tokens, 1, seq);
  const auto b = net->logits(perturbed, 1, seq);
  for (std::size_t r = 0; r < s; ++r)
    for (std::size_t c = 0; c < vocab; ++c)
      if (std::memcmp(&a(r, c), &b(r, c), sizeof(double)) != 0) return false;
  return true;
}

}  // namespace crate::model
