#include "crate/sae/sae.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "crate/model/checkpoint.hpp"

namespace crate::sae {

namespace fs = std::filesystem;

void SaeConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error("bad_config", "sae: " + m); };
  if (multiplier < 1) fail("multiplier must be >= 1");
  if (!(l1 >= 0.0) || !std::isfinite(l1)) fail("l1 must be finite and >= 0");
  if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("betas must be in [0, 1)");
  if (batch == 0 || steps == 0) fail("batch and steps must be positive");
  if (dead_window == 0) fail("dead_window must be positive");
}

void to_json(nlohmann::json& j, const SaeConfig& c) {
  j = nlohmann::json{{"input_dim", c.input_dim},
                     {"multiplier", c.multiplier},
                     {"l1", c.l1},
                     {"lr", c.lr},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"batch", c.batch},
                     {"steps", c.steps},
                     {"resample_interval", c.resample_interval},
                     {"dead_window", c.dead_window},
                     {"log_interval", c.log_interval},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SaeConfig& c) {
  require(j.is_object(), "bad_config", "sae config must be an object");
  const nlohmann::json defaults = c;
  for (const auto& [key, value] : j.items())
    require(defaults.contains(key), "unknown_key", "unknown sae key '" + key + "'");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("input_dim", c.input_dim);
  get("multiplier", c.multiplier);
  get("l1", c.l1);
  get("lr", c.lr);
  get("beta1", c.beta1);
  get("beta2", c.beta2);
  get("batch", c.batch);
  get("steps", c.steps);
  get("resample_interval", c.resample_interval);
  get("dead_window", c.dead_window);
  get("log_interval", c.log_interval);
  get("seed", c.seed);
}

bool SaeParams::finite() const {
  return w1.allFinite() && b1.allFinite() && w2.allFinite() && b2.allFinite();
}

SaeParams init_sae(std::size_t input_dim, std::size_t multiplier, const Mat<double>& data,
                   Rng& rng) {
  require(input_dim > 0 && multiplier >= 1, "bad_config", "sae dimensions must be positive");
  const auto n = static_cast<Eigen::Index>(input_dim);
  const auto m = static_cast<Eigen::Index>(input_dim * multiplier);
  SaeParams p;
  p.w2.resize(n, m);
  for (Eigen::Index i = 0; i < p.w2.size(); ++i) p.w2.data()[i] = rng.normal();
  normalize_decoder(p);
  p.w1 = p.w2.transpose();
  p.b1 = Mat<double>::Zero(1, m);
  p.b2 = Mat<double>::Zero(1, n);
  if (data.rows() > 0) {
    require(data.cols() == n, "bad_shape", "sae data width does not match input_dim");
    p.b2 = data.colwise().mean();
  }
  return p;
}

SaeParams identity_sae(std::size_t input_dim) {
  const auto n = static_cast<Eigen::Index>(input_dim);
  SaeParams p;
  p.w1.resize(2 * n, n);
  p.w1 << Mat<double>::Identity(n, n), -Mat<double>::Identity(n, n);
  p.w2.resize(n, 2 * n);
  p.w2 << Mat<double>::Identity(n, n), -Mat<double>::Identity(n, n);
  p.b1 = Mat<double>::Zero(1, 2 * n);
  p.b2 = Mat<double>::Zero(1, n);
  return p;
}

SaeParams zero_sae(std::size_t input_dim, std::size_t multiplier) {
  const auto n = static_cast<Eigen::Index>(input_dim);
  const auto m = static_cast<Eigen::Index>(input_dim * multiplier);
  return {Mat<double>::Zero(m, n), Mat<double>::Zero(1, m), Mat<double>::Zero(n, m),
          Mat<double>::Zero(1, n)};
}

SaeOutput sae_forward(const Mat<double>& a, const SaeParams& p) {
  require(a.cols() == p.w2.rows(), "bad_shape", "sae input width mismatch");
  SaeOutput out;
  const Mat<double> centered = a.rowwise() - p.b2.row(0);
  out.hidden = ((centered * p.w1.transpose()).rowwise() + p.b1.row(0)).cwiseMax(0.0);
  out.recon = (out.hidden * p.w2.transpose()).rowwise() + p.b2.row(0);
  return out;
}

SaeLoss sae_loss(const Mat<double>& a, const SaeParams& p, double l1_coeff) {
  return sae_loss_grad(a, p, l1_coeff, nullptr);
}

SaeLoss sae_loss_grad(const Mat<double>& a, const SaeParams& p, double l1_coeff, SaeParams* grad) {
  require(a.rows() > 0, "bad_shape", "sae loss needs at least one sample");
  const double inv_n = 1.0 / static_cast<double>(a.rows());
  const Mat<double> centered = a.rowwise() - p.b2.row(0);
  const Mat<double> pre = (centered * p.w1.transpose()).rowwise() + p.b1.row(0);
  const Mat<double> hidden = pre.cwiseMax(0.0);
  const Mat<double> err = ((hidden * p.w2.transpose()).rowwise() + p.b2.row(0)) - a;
  SaeLoss loss;
  loss.mse = err.squaredNorm() * inv_n;
  loss.l1 = hidden.sum() * inv_n;  // hidden >= 0
  loss.total = loss.mse + l1_coeff * loss.l1;
  if (!grad) return loss;

  const Mat<double> d_recon = (2.0 * inv_n) * err;
  Mat<double> d_hidden = d_recon * p.w2;
  d_hidden.array() += l1_coeff * inv_n;
  const Mat<double> d_pre = (pre.array() > 0.0).select(d_hidden, 0.0);
  grad->w2 = d_recon.transpose() * hidden;
  grad->w1 = d_pre.transpose() * centered;
  grad->b1 = d_pre.colwise().sum();
  grad->b2 = d_recon.colwise().sum() - (d_pre * p.w1).colwise().sum();
  return loss;
}

void normalize_decoder(SaeParams& p) {
  for (Eigen::Index c = 0; c < p.w2.cols(); ++c) {
    const double norm = p.w2.col(c).norm();
    if (norm > 0) p.w2.col(c) /= norm;
  }
}

void FiringStats::update(const Mat<double>& hidden) {
  require(static_cast<std::size_t>(hidden.cols()) == since_fire.size(), "bad_shape",
          "firing stats width mismatch");
  for (Eigen::Index r = 0; r < hidden.rows(); ++r)
    for (Eigen::Index c = 0; c < hidden.cols(); ++c) {
      auto& s = since_fire[static_cast<std::size_t>(c)];
      s = hidden(r, c) > 0.0 ? 0 : s + 1;
    }
  samples += static_cast<std::uint64_t>(hidden.rows());
}

std::vector<std::size_t> FiringStats::dead(std::uint64_t window) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < since_fire.size(); ++i)
    if (since_fire[i] >= window) out.push_back(i);
  return out;
}

double FiringStats::dead_fraction(std::uint64_t window) const {
  if (since_fire.empty() || samples == 0) return 0.0;
  return static_cast<double>(dead(std::min(window, samples)).size()) /
         static_cast<double>(since_fire.size());
}

ResampleReport resample_dead(SaeParams& p, const FiringStats& stats, std::uint64_t dead_window,
                             const Mat<double>& pool, Rng& rng) {
  require(stats.samples >= dead_window, "bad_argument",
          "firing stats cover fewer samples than the dead window");
  ResampleReport report;
  report.resampled = stats.dead(dead_window);
  if (report.resampled.empty()) return report;
  require(pool.rows() > 0, "empty_pool", "no replacement inputs for dead units");

  const auto out = sae_forward(pool, p);
  std::vector<double> weight(static_cast<std::size_t>(pool.rows()));
  double total = 0;
  for (Eigen::Index r = 0; r < pool.rows(); ++r) {
    const double l = (out.recon.row(r) - pool.row(r)).squaredNorm();
    weight[static_cast<std::size_t>(r)] = l * l;
    total += l * l;
  }
  std::vector<bool> is_dead(p.hidden_dim(), false);
  for (std::size_t u : report.resampled) is_dead[u] = true;
  double live_norm = 0;
  std::size_t live = 0;
  for (std::size_t u = 0; u < p.hidden_dim(); ++u)
    if (!is_dead[u]) {
      live_norm += p.w1.row(static_cast<Eigen::Index>(u)).norm();
      ++live;
    }
  const double scale = 0.2 * (live ? live_norm / static_cast<double>(live) : 1.0);

  for (std::size_t u : report.resampled) {
    Eigen::Index pick = 0;
    if (total > 0) {
      double x = rng.uniform() * total;
      while (pick + 1 < pool.rows() && x >= weight[static_cast<std::size_t>(pick)])
        x -= weight[static_cast<std::size_t>(pick++)];
    } else {
      pick = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(pool.rows())));
    }
    Mat<double> dir = pool.row(pick) - p.b2;
    const double norm = dir.norm();
    if (norm > 0) {
      dir /= norm;
    } else {
      for (Eigen::Index i = 0; i < dir.size(); ++i) dir(0, i) = rng.normal();
      dir /= dir.norm();
    }
    const auto col = static_cast<Eigen::Index>(u);
    p.w2.col(col) = dir.transpose();
    p.w1.row(col) = scale * dir;
    p.b1(0, col) = 0.0;
  }
  return report;
}

namespace {

struct AdamState {
  SaeParams m, v;
  std::size_t t = 0;
};

void adam_update(Mat<double>& w, const Mat<double>& g, Mat<double>& m, Mat<double>& v,
                 const SaeConfig& c, double bc1, double bc2) {
  m = c.beta1 * m + (1 - c.beta1) * g;
  v = c.beta2 * v + (1 - c.beta2) * g.cwiseProduct(g);
  w.array() -= c.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + 1e-8);
}

void adam_step(SaeParams& p, const SaeParams& g, AdamState& s, const SaeConfig& c) {
  ++s.t;
  const double bc1 = 1 - std::pow(c.beta1, static_cast<double>(s.t));
  const double bc2 = 1 - std::pow(c.beta2, static_cast<double>(s.t));
  adam_update(p.w1, g.w1, s.m.w1, s.v.w1, c, bc1, bc2);
  adam_update(p.b1, g.b1, s.m.b1, s.v.b1, c, bc1, bc2);
  adam_update(p.w2, g.w2, s.m.w2, s.v.w2, c, bc1, bc2);
  adam_update(p.b2, g.b2, s.m.b2, s.v.b2, c, bc1, bc2);
}

}  // namespace

SaeTrainResult train_sae(const Mat<double>& data, SaeConfig config, Rng& rng,
                         const fs::path& log_csv, const SaeParams* init) {
  require(data.rows() > 0, "empty_corpus", "no activations to train on");
  if (config.input_dim == 0) config.input_dim = static_cast<std::size_t>(data.cols());
  require(config.input_dim == static_cast<std::size_t>(data.cols()), "bad_shape",
          "sae input_dim does not match the data");
  config.validate();

  SaeTrainResult result;
  result.params = init ? *init : init_sae(config.input_dim, config.multiplier, data, rng);
  SaeParams& p = result.params;
  require(p.input_dim() == config.input_dim, "bad_shape", "initial sae has the wrong input width");
  normalize_decoder(p);
  AdamState adam;
  adam.m = {Mat<double>::Zero(p.w1.rows(), p.w1.cols()), Mat<double>::Zero(1, p.b1.cols()),
            Mat<double>::Zero(p.w2.rows(), p.w2.cols()), Mat<double>::Zero(1, p.b2.cols())};
  adam.v = adam.m;

  std::ofstream csv;
  if (!log_csv.empty()) {
    if (log_csv.has_parent_path()) fs::create_directories(log_csv.parent_path());
    csv.open(log_csv, std::ios::trunc);
    require(static_cast<bool>(csv), "io_error", "cannot write " + log_csv.string());
    csv << kSaeCsvHeader << "\n" << std::setprecision(9);
  }

  FiringStats stats(p.hidden_dim());
  Mat<double> batch(static_cast<Eigen::Index>(config.batch), data.cols());
  SaeParams grad;
  for (std::size_t step = 0; step < config.steps; ++step) {
    for (Eigen::Index r = 0; r < batch.rows(); ++r)
      batch.row(r) = data.row(static_cast<Eigen::Index>(
          rng.uniform_int(static_cast<std::uint64_t>(data.rows()))));
    const SaeLoss loss = sae_loss_grad(batch, p, config.l1, &grad);
    if (!std::isfinite(loss.total) || !grad.finite())
      throw Error("nan_loss", "sae loss became non-finite at step " + std::to_string(step));
    stats.update(sae_forward(batch, p).hidden);
    adam_step(p, grad, adam, config);
    normalize_decoder(p);

    if (config.resample_interval > 0 && (step + 1) % config.resample_interval == 0 &&
        stats.samples >= config.dead_window) {
      const std::size_t pool_rows = std::min<std::size_t>(static_cast<std::size_t>(data.rows()), 4096);
      Mat<double> pool(static_cast<Eigen::Index>(pool_rows), data.cols());
      for (Eigen::Index r = 0; r < pool.rows(); ++r)
        pool.row(r) = data.row(static_cast<Eigen::Index>(
            rng.uniform_int(static_cast<std::uint64_t>(data.rows()))));
      auto report = resample_dead(p, stats, config.dead_window, pool, rng);
      for (std::size_t u : report.resampled) {
        const auto i = static_cast<Eigen::Index>(u);
        adam.m.w1.row(i).setZero();
        adam.v.w1.row(i).setZero();
        adam.m.w2.col(i).setZero();
        adam.v.w2.col(i).setZero();
        adam.m.b1(0, i) = adam.v.b1(0, i) = 0;
        stats.since_fire[u] = 0;
      }
      if (!report.resampled.empty()) result.resamples.push_back(std::move(report));
    }

    const bool last = step + 1 == config.steps;
    if (last || (config.log_interval > 0 && step % config.log_interval == 0)) {
      SaeLogRow row{step, loss.mse, loss.l1, stats.dead_fraction(config.dead_window)};
      result.log.push_back(row);
      if (csv.is_open())
        csv << row.step << ',' << row.mse << ',' << row.l1 << ',' << row.dead_fraction << "\n";
    }
  }
  return result;
}

Mat<double> dump_samples(const lab::ActivationDump& dump) {
  const auto rows = static_cast<Eigen::Index>(dump.excerpt_len * dump.n_excerpts);
  Mat<double> out(rows, static_cast<Eigen::Index>(dump.hidden));
  for (std::size_t b = 0; b < dump.n_excerpts; ++b)
    for (std::size_t t = 0; t < dump.excerpt_len; ++t)
      for (std::size_t n = 0; n < dump.hidden; ++n)
        out(static_cast<Eigen::Index>(b * dump.excerpt_len + t), static_cast<Eigen::Index>(n)) =
            dump.at(n, t, b);
  return out;
}

template <class T>
RecoveryResult recovery_score(const model::LanguageModel<T>& model, std::size_t layer,
                              const SaeParams& sae, const data::TokenStream& stream,
                              std::size_t n_batches, std::size_t batch, std::size_t seq, Rng& rng) {
  require(layer < model.config().n_layer, "bad_argument", "layer out of range");
  require(sae.input_dim() == model.config().d_hidden, "bad_shape",
          "sae input width does not match the layer width");
  require(n_batches > 0, "bad_argument", "recovery needs at least one batch");
  std::vector<data::TokenBatch> batches;
  for (std::size_t i = 0; i < n_batches; ++i)
    batches.push_back(data::sample_batch(stream, batch, seq, rng));

  auto mean_loss = [&](const model::ActivationHook<T>& hook) {
    double total = 0;
    for (const auto& b : batches) total += model.loss(b.inputs, b.targets, b.batch, b.seq, hook);
    return total / static_cast<double>(batches.size());
  };
  RecoveryResult r;
  r.loss_base = mean_loss({});
  r.loss_zero = mean_loss([&](std::size_t l, Mat<T>& a) {
    if (l == layer) a.setZero();
  });
  r.loss_patch = mean_loss([&](std::size_t l, Mat<T>& a) {
    if (l != layer) return;
    const Mat<double> recon = sae_forward(a.template cast<double>(), sae).recon;
    a = recon.template cast<T>();
  });
  require(r.loss_zero > r.loss_base, "degenerate_ablation",
          "zeroing the layer does not increase the loss; recovery score undefined");
  r.score = 100.0 * (r.loss_zero - r.loss_patch) / (r.loss_zero - r.loss_base);
  return r;
}

template RecoveryResult recovery_score<float>(const model::LanguageModel<float>&, std::size_t,
                                              const SaeParams&, const data::TokenStream&,
                                              std::size_t, std::size_t, std::size_t, Rng&);
template RecoveryResult recovery_score<double>(const model::LanguageModel<double>&, std::size_t,
                                               const SaeParams&, const data::TokenStream&,
                                               std::size_t, std::size_t, std::size_t, Rng&);

namespace {

Tensor<float> to_tensor(const Mat<double>& m, bool vector) {
  Shape shape = vector ? Shape{static_cast<std::size_t>(m.size())}
                       : Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())};
  return Tensor<float>(shape, std::vector<float>(m.data(), m.data() + m.size()));
}

Mat<double> from_tensor(const Tensor<float>& t, Eigen::Index rows, Eigen::Index cols) {
  require(t.numel() == static_cast<std::size_t>(rows * cols), "bad_checkpoint",
          "sae tensor has the wrong size");
  Mat<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = t.values[static_cast<std::size_t>(i)];
  return m;
}

}  // namespace

void save_sae(const fs::path& dir, const SaeParams& p, const SaeConfig& config, std::size_t step) {
  model::Checkpoint ckpt;
  ckpt.kind = "sae";
  ckpt.config = config;
  ckpt.step = step;
  ckpt.seed = config.seed;
  ckpt.tensors = {{"w1", to_tensor(p.w1, false)},
                  {"b1", to_tensor(p.b1, true)},
                  {"w2", to_tensor(p.w2, false)},
                  {"b2", to_tensor(p.b2, true)}};
  model::write_checkpoint(dir, ckpt);
}

SaeParams load_sae(const fs::path& dir, SaeConfig* config) {
  const auto ckpt = model::read_checkpoint(dir);
  require(ckpt.kind == "sae", "bad_checkpoint", "checkpoint kind is " + ckpt.kind);
  const auto& w1 = ckpt.tensor("w1");
  require(w1.shape.size() == 2, "bad_checkpoint", "w1 must be a matrix");
  const auto m = static_cast<Eigen::Index>(w1.shape[0]);
  const auto n = static_cast<Eigen::Index>(w1.shape[1]);
  SaeParams p{from_tensor(w1, m, n), from_tensor(ckpt.tensor("b1"), 1, m),
              from_tensor(ckpt.tensor("w2"), n, m), from_tensor(ckpt.tensor("b2"), 1, n)};
  if (config) *config = ckpt.config.get<SaeConfig>();
  return p;
}

}  // namespace crate::sae
