#include "crate/train/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>

#include "crate/model/checkpoint.hpp"

namespace crate::train {

namespace {

constexpr std::uint64_t kDropoutStream = 0x64726f706f7574ULL;

std::string format_double(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error("bad_config", "train: " + m); };
  if (batch == 0 || seq == 0 || steps == 0) fail("batch, seq and steps must be positive");
  if (!(lr >= 0.0) || !std::isfinite(lr)) fail("lr must be finite and non-negative");
  if (!(min_lr_ratio >= 0.0 && min_lr_ratio <= 1.0)) fail("min_lr_ratio must be in [0, 1]");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (schedule != "cosine" && schedule != "constant") fail("schedule must be cosine|constant");
  if (eval_batches == 0) fail("eval_batches must be positive");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
    fail("validation_fraction must be in (0, 1)");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"batch", c.batch},
                     {"seq", c.seq},
                     {"steps", c.steps},
                     {"lr", c.lr},
                     {"min_lr_ratio", c.min_lr_ratio},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"adam_eps", c.adam_eps},
                     {"weight_decay", c.weight_decay},
                     {"warmup", c.warmup},
                     {"schedule", c.schedule},
                     {"grad_clip", c.grad_clip},
                     {"eval_interval", c.eval_interval},
                     {"eval_batches", c.eval_batches},
                     {"checkpoint_interval", c.checkpoint_interval},
                     {"validation_fraction", c.validation_fraction},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  require(j.is_object(), "bad_config", "train config must be an object");
  nlohmann::json defaults = c;
  for (const auto& [key, value] : j.items())
    require(defaults.contains(key), "unknown_key", "unknown train key '" + key + "'");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("batch", c.batch);
  get("seq", c.seq);
  get("steps", c.steps);
  get("lr", c.lr);
  get("min_lr_ratio", c.min_lr_ratio);
  get("beta1", c.beta1);
  get("beta2", c.beta2);
  get("adam_eps", c.adam_eps);
  get("weight_decay", c.weight_decay);
  get("warmup", c.warmup);
  get("schedule", c.schedule);
  get("grad_clip", c.grad_clip);
  get("eval_interval", c.eval_interval);
  get("eval_batches", c.eval_batches);
  get("checkpoint_interval", c.checkpoint_interval);
  get("validation_fraction", c.validation_fraction);
  get("seed", c.seed);
}

double learning_rate(const TrainConfig& config, std::size_t step) {
  if (config.warmup > 0 && step < config.warmup)
    return config.lr * static_cast<double>(step + 1) / static_cast<double>(config.warmup);
  if (config.schedule == "constant") return config.lr;
  const std::size_t decay_steps = config.steps > config.warmup ? config.steps - config.warmup : 1;
  const double progress =
      std::min(1.0, static_cast<double>(step - config.warmup) /
                        static_cast<double>(std::max<std::size_t>(decay_steps - 1, 1)));
  const double floor = config.min_lr_ratio * config.lr;
  return floor + 0.5 * (config.lr - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <class T>
AdamW<T>::AdamW(const model::ParamStore<T>& params, const TrainConfig& config) : config_(config) {
  for (const auto& p : params) {
    m_.push_back(Mat<T>::Zero(p.value.rows(), p.value.cols()));
    v_.push_back(Mat<T>::Zero(p.value.rows(), p.value.cols()));
  }
}

template <class T>
void AdamW<T>::step(model::ParamStore<T>& params, const std::vector<Mat<T>>& grads, double lr) {
  require(grads.size() == params.size(), "bad_argument", "one gradient per parameter");
  ++t_;
  const T b1 = static_cast<T>(config_.beta1);
  const T b2 = static_cast<T>(config_.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(config_.beta1, static_cast<double>(t_)));
  const T c2 = static_cast<T>(1.0 - std::pow(config_.beta2, static_cast<double>(t_)));
  const T step = static_cast<T>(lr);
  const T eps = static_cast<T>(config_.adam_eps);
  const T decay = static_cast<T>(1.0 - lr * config_.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].value.matrix();
    const Mat<T>& g = grads[i];
    m_[i] = b1 * m_[i] + (T(1) - b1) * g;
    v_[i] = b2 * v_[i] + (T(1) - b2) * g.cwiseProduct(g);
    if (params[i].decay) w *= decay;
    w.array() -= step * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
  }
}

template <class T>
Trainer<T>::Trainer(model::LanguageModel<T>& model, TrainConfig config)
    : model_(model), config_(std::move(config)), optimizer_(model.params(), config_) {
  config_.validate();
}

template <class T>
StepStats Trainer<T>::step(const data::TokenBatch& batch, std::size_t step_index) {
  auto& params = model_.params();
  ag::Tape<T> tape(true);
  auto bound = params.bind(tape, true);
  Rng dropout_rng = Rng(config_.seed).fork(kDropoutStream ^ step_index);
  model::ForwardOptions<T> options;
  options.training = true;
  options.dropout_rng = &dropout_rng;
  StepStats stats;
  stats.lr = learning_rate(config_, step_index);
  ag::Var loss;
  try {
    auto trace = model_.forward(tape, bound, batch.inputs, batch.batch, batch.seq, options);
    loss = ag::cross_entropy(tape, trace.logits, batch.targets);
  } catch (const Error& e) {
    if (e.code() != "non_finite") throw;
    stats.loss = std::numeric_limits<double>::quiet_NaN();
  }
  if (loss.valid()) stats.loss = static_cast<double>(tape.value(loss)(0, 0));
  if (!std::isfinite(stats.loss)) {
    std::ostringstream os;
    os << "non-finite loss at step " << step_index << " (batch seed " << config_.seed
       << ", stream " << step_index << ", starts";
    for (auto s : batch.starts) os << ' ' << s;
    os << ")";
    throw Error("nan_loss", os.str());
  }
  tape.backward(loss);
  std::vector<Mat<T>> grads;
  grads.reserve(params.size());
  double sq = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (tape.has_grad(bound[i]))
      grads.push_back(tape.grad(bound[i]));
    else
      grads.push_back(Mat<T>::Zero(params[i].value.rows(), params[i].value.cols()));
    sq += static_cast<double>(grads.back().template cast<double>().squaredNorm());
  }
  stats.grad_norm = std::sqrt(sq);
  require(std::isfinite(stats.grad_norm), "nan_loss",
          "non-finite gradient at step " + std::to_string(step_index));
  if (config_.grad_clip > 0 && stats.grad_norm > config_.grad_clip) {
    const T factor = static_cast<T>(config_.grad_clip / (stats.grad_norm + 1e-6));
    for (auto& g : grads) g *= factor;
  }
  optimizer_.step(params, grads, stats.lr);
  return stats;
}

template <class T>
double eval_loss(const model::LanguageModel<T>& model, const data::TokenStream& stream,
                 std::size_t n_batches, std::size_t batch, std::size_t seq, Rng& rng) {
  require(n_batches > 0, "bad_argument", "eval needs at least one batch");
  double total = 0;
  for (std::size_t i = 0; i < n_batches; ++i) {
    auto b = data::sample_batch(stream, batch, seq, rng);
    total += model.loss(b.inputs, b.targets, b.batch, b.seq);
  }
  return total / static_cast<double>(n_batches);
}

template <class T>
TrainResult train(model::LanguageModel<T>& model, const data::TokenStream& stream,
                  const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  auto split = data::split_stream(stream, config.validation_fraction);
  Trainer<T> trainer(model, config);
  std::ofstream csv;
  if (!options.log_csv.empty()) {
    if (options.log_csv.has_parent_path()) std::filesystem::create_directories(options.log_csv.parent_path());
    csv.open(options.log_csv, std::ios::trunc);
    require(static_cast<bool>(csv), "io_error", "cannot write " + options.log_csv.string());
    csv << kTrainCsvHeader << "\n";
  }
  const Rng root(config.seed);
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result;
  for (std::size_t s = 0; s < config.steps; ++s) {
    Rng batch_rng = root.fork(s);
    auto batch = data::sample_batch(split.train, config.batch, config.seq, batch_rng);
    StepStats stats;
    try {
      stats = trainer.step(batch, s);
    } catch (const Error& e) {
      if (e.code() == "nan_loss" && !options.checkpoint_dir.empty()) {
        std::filesystem::create_directories(options.checkpoint_dir);
        nlohmann::json dump = {{"step", s},       {"seed", config.seed},   {"starts", batch.starts},
                               {"inputs", batch.inputs}, {"targets", batch.targets}};
        std::ofstream(options.checkpoint_dir / "nan_batch.json") << dump.dump() << "\n";
      }
      throw;
    }
    const bool last = s + 1 == config.steps;
    LogRow row;
    row.step = s + 1;
    row.train_loss = stats.loss;
    row.val_loss = std::numeric_limits<double>::quiet_NaN();
    row.tokens = static_cast<std::uint64_t>(s + 1) * config.batch * config.seq;
    if (last || (config.eval_interval > 0 && (s + 1) % config.eval_interval == 0)) {
      Rng eval_rng = root.fork(~std::uint64_t{0});  // same validation batches at every eval
      row.val_loss = eval_loss(model, split.validation, config.eval_batches, config.batch,
                               config.seq, eval_rng);
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (csv.is_open())
      csv << row.step << ',' << format_double(row.train_loss) << ',' << format_double(row.val_loss)
          << ',' << row.tokens << ',' << format_double(row.seconds) << "\n";
    if (options.on_row) options.on_row(row);
    result.rows.push_back(row);
    if (!options.checkpoint_dir.empty() && config.checkpoint_interval > 0 &&
        (s + 1) % config.checkpoint_interval == 0 && !last)
      model::save_model(model, options.checkpoint_dir / ("step_" + std::to_string(s + 1)), s + 1,
                        config.seed);
    if (last) {
      result.final_train_loss = row.train_loss;
      result.final_val_loss = row.val_loss;
    }
  }
  if (!options.checkpoint_dir.empty())
    model::save_model(model, options.checkpoint_dir / "final", config.steps, config.seed);
  return result;
}

template class AdamW<float>;
template class AdamW<double>;
template class Trainer<float>;
template class Trainer<double>;
template TrainResult train<float>(model::LanguageModel<float>&, const data::TokenStream&,
                                  const TrainConfig&, const TrainOptions&);
template TrainResult train<double>(model::LanguageModel<double>&, const data::TokenStream&,
                                   const TrainConfig&, const TrainOptions&);
template double eval_loss<float>(const model::LanguageModel<float>&, const data::TokenStream&,
                                 std::size_t, std::size_t, std::size_t, Rng&);
template double eval_loss<double>(const model::LanguageModel<double>&, const data::TokenStream&,
                                  std::size_t, std::size_t, std::size_t, Rng&);

}  // namespace crate::train
