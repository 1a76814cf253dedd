#include "support.hpp"

#include "crate/data/synthetic.hpp"
#include "crate/model/diagnostics.hpp"

#include "crate/numerics/grad_check.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cctype>
#include <cstring>
#include <functional>

#include <unistd.h>

namespace crate::testkit {

std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
  return data::synthetic_text(bytes, seed);
}

double byte_entropy(const std::string& text) {
  std::array<double, 256> counts{};
  for (unsigned char c : text) counts[c] += 1;
  double h = 0;
  for (double c : counts) {
    if (c == 0) continue;
    const double p = c / static_cast<double>(text.size());
    h -= p * std::log(p);
  }
  return h;
}

std::filesystem::path temp_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  auto dir = std::filesystem::temp_directory_path() /
             ("crate_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
              std::to_string(counter++));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

Tensor<double> random_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values) v = stddev * rng.normal();
  return t;
}

Tensor<double> plain_layer_norm(const Tensor<double>& x, double eps) {
  Tensor<double> out(x.shape);
  const std::size_t d = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mean = 0;
    for (std::size_t i = 0; i < d; ++i) mean += x(r, i);
    mean /= static_cast<double>(d);
    double var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (x(r, i) - mean) * (x(r, i) - mean);
    var /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) out(r, i) = (x(r, i) - mean) / std::sqrt(var + eps);
  }
  return out;
}

Tensor<double> ista_two_step_expansion(const Tensor<double>& x, const Tensor<double>& dict,
                                       double eta, double lambda) {
  const std::size_t rows = x.rows();
  const std::size_t d = dict.rows();
  const std::size_t h = dict.cols();
  Tensor<double> out({rows, h});
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<double> dtx(h, 0.0), a1(h), recon(d, 0.0), dtda(h, 0.0);
    for (std::size_t j = 0; j < h; ++j)
      for (std::size_t i = 0; i < d; ++i) dtx[j] += dict(i, j) * x(r, i);
    for (std::size_t j = 0; j < h; ++j) a1[j] = std::max(0.0, eta * dtx[j] - eta * lambda);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < h; ++j) recon[i] += dict(i, j) * a1[j];
    for (std::size_t j = 0; j < h; ++j)
      for (std::size_t i = 0; i < d; ++i) dtda[j] += dict(i, j) * recon[i];
    for (std::size_t j = 0; j < h; ++j)
      out(r, j) = std::max(0.0, a1[j] + eta * (dtx[j] - dtda[j]) - eta * lambda);
  }
  return out;
}

double lasso_objective(const std::vector<double>& x, const Tensor<double>& dict,
                       const std::vector<double>& a, double lambda) {
  double sq = 0;
  for (std::size_t i = 0; i < dict.rows(); ++i) {
    double r = x[i];
    for (std::size_t j = 0; j < dict.cols(); ++j) r -= dict(i, j) * a[j];
    sq += r * r;
  }
  double l1 = 0;
  for (double v : a) l1 += v;
  return 0.5 * sq + lambda * l1;
}

std::vector<double> nonneg_lasso_cd(const std::vector<double>& x, const Tensor<double>& dict,
                                    double lambda, std::size_t sweeps) {
  const std::size_t d = dict.rows();
  const std::size_t h = dict.cols();
  std::vector<double> a(h, 0.0), residual(x);
  std::vector<double> col_sq(h, 0.0);
  for (std::size_t j = 0; j < h; ++j)
    for (std::size_t i = 0; i < d; ++i) col_sq[j] += dict(i, j) * dict(i, j);
  for (std::size_t s = 0; s < sweeps; ++s) {
    double max_change = 0;
    for (std::size_t j = 0; j < h; ++j) {
      if (col_sq[j] == 0) continue;
      double rho = 0;
      for (std::size_t i = 0; i < d; ++i) rho += dict(i, j) * residual[i];
      const double updated = std::max(0.0, a[j] + (rho - lambda) / col_sq[j]);
      const double delta = updated - a[j];
      if (delta != 0) {
        for (std::size_t i = 0; i < d; ++i) residual[i] -= dict(i, j) * delta;
        a[j] = updated;
      }
      max_change = std::max(max_change, std::abs(delta));
    }
    if (max_change < 1e-14) break;
  }
  return a;
}

std::vector<double> jacobi_eigenvalues(Tensor<double> a) {
  const std::size_t n = a.rows();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-24) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a(i, i);
  return eig;
}

template <class T>
Tensor<T> patched_forward(const model::LanguageModel<T>& model,
                          const std::vector<std::uint32_t>& tokens, std::size_t layer,
                          const std::function<void(Mat<T>&)>& patch) {
  ag::Tape<T> tape(false);
  auto bound = model.params().bind(tape, false);
  const model::ForwardOptions<T> none;
  const std::size_t seq = tokens.size();
  ag::Var z = model.embed(tape, bound, tokens, 1, seq);
  for (std::size_t l = 0; l < model.config().n_layer; ++l) {
    ag::Var z_half = model.attention_block(tape, bound, l, z, 1, seq, none);
    ag::Var acts = model.encode(tape, bound, l, z_half);
    if (l == layer) {
      Mat<T> value = tape.value(acts);
      patch(value);
      acts = tape.leaf(value);
    }
    z = model.decode(tape, bound, l, z_half, acts, none);
  }
  return Tensor<T>::from_matrix(tape.value(model.head(tape, bound, z)));
}

template Tensor<float> patched_forward<float>(const model::LanguageModel<float>&,
                                              const std::vector<std::uint32_t>&, std::size_t,
                                              const std::function<void(Mat<float>&)>&);
template Tensor<double> patched_forward<double>(const model::LanguageModel<double>&,
                                                const std::vector<std::uint32_t>&, std::size_t,
                                                const std::function<void(Mat<double>&)>&);

model::ModelConfig tiny_config(model::Arch arch, std::size_t d, std::size_t heads,
                               std::size_t layers, std::size_t vocab, std::size_t context) {
  model::ModelConfig c;
  c.arch = arch;
  c.d_model = d;
  c.n_head = heads;
  c.n_layer = layers;
  c.d_hidden = 4 * d;
  c.vocab_size = vocab;
  c.context = context;
  return c;
}

}  // namespace crate::testkit

namespace crate::testkit {

double full_model_grad_error(model::Arch arch, std::uint64_t seed, double h) {
  auto config = tiny_config(arch, 8, 2, 2, 11, 5);
  Rng rng(seed);
  auto net = model::make_model<double>(config, rng);
  for (auto& p : net->params())
    for (auto& v : p.value.values) v = 0.4 * rng.normal() + (p.name.ends_with(".g") ? 1.0 : 0.0);
  const std::size_t seq = 5;
  std::vector<std::uint32_t> inputs(seq), targets(seq);
  for (std::size_t t = 0; t < seq; ++t) {
    inputs[t] = static_cast<std::uint32_t>(rng.uniform_int(11));
    targets[t] = static_cast<std::uint32_t>(rng.uniform_int(11));
  }
  GradFunction f = [&](const Tensor<double>& x, Tensor<double>* g) {
    net->params().assign_flat(x.span());
    ag::Tape<double> tape(g != nullptr);
    auto bound = net->params().bind(tape, g != nullptr);
    auto trace = net->forward(tape, bound, inputs, 1, seq);
    ag::Var loss = ag::cross_entropy(tape, trace.logits, targets);
    if (g) {
      tape.backward(loss);
      std::vector<double> flat;
      for (std::size_t i = 0; i < bound.size(); ++i) {
        const auto& p = net->params()[i].value;
        if (tape.has_grad(bound[i])) {
          const auto& gm = tape.grad(bound[i]);
          flat.insert(flat.end(), gm.data(), gm.data() + gm.size());
        } else {
          flat.insert(flat.end(), p.numel(), 0.0);
        }
      }
      *g = Tensor<double>(x.shape, std::move(flat));
    }
    return tape.value(loss)(0, 0);
  };
  return grad_check(f, net->params().flatten(), h);
}

bool causality_trial(Rng& rng, std::string* description) {
  return model::causality_trial(rng, description);
}

lab::ActivationDump synthetic_dump(std::size_t layer, std::size_t hidden, std::size_t excerpt_len,
                                   std::size_t n_excerpts, std::uint64_t seed, double density,
                                   double scale) {
  Rng rng(seed);
  lab::ActivationDump d;
  d.model_id = "synthetic";
  d.arch = "crate";
  d.layer = layer;
  d.hidden = hidden;
  d.excerpt_len = excerpt_len;
  d.n_excerpts = n_excerpts;
  d.activations.resize(hidden * excerpt_len * n_excerpts);
  for (auto& a : d.activations)
    a = rng.uniform() < density ? static_cast<float>(scale * (1.0 - rng.uniform())) : 0.0f;
  d.tokens.resize(excerpt_len * n_excerpts);
  for (auto& t : d.tokens) t = static_cast<std::uint32_t>(rng.uniform_int(256));
  return d;
}

}  // namespace crate::testkit
