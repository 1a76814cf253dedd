#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crate/data/token_stream.hpp"
#include "crate/model/language_model.hpp"

namespace crate::train {

struct TrainConfig {
  std::size_t batch = 16;
  std::size_t seq = 64;
  std::size_t steps = 2000;
  double lr = 2e-3;
  double min_lr_ratio = 0.1;  // cosine floor, as a fraction of lr
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;  // matrices only
  std::size_t warmup = 100;
  std::string schedule = "cosine";  // cosine | constant
  double grad_clip = 1.0;           // global norm; <= 0 disables
  std::size_t eval_interval = 200;
  std::size_t eval_batches = 8;
  std::size_t checkpoint_interval = 0;  // 0: only the final checkpoint
  double validation_fraction = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Learning rate at `step` (0-based): linear warmup to lr, then cosine decay
/// to min_lr_ratio * lr at the final step.
double learning_rate(const TrainConfig& config, std::size_t step);

/// Decoupled-weight-decay Adam over a ParamStore.
template <class T>
class AdamW {
 public:
  AdamW(const model::ParamStore<T>& params, const TrainConfig& config);

  /// grads[i] matches params[i]; applies one update with learning rate lr.
  void step(model::ParamStore<T>& params, const std::vector<Mat<T>>& grads, double lr);

  std::size_t steps_taken() const { return t_; }

 private:
  TrainConfig config_;
  std::vector<Mat<T>> m_;
  std::vector<Mat<T>> v_;
  std::size_t t_ = 0;
};

struct StepStats {
  double loss = 0;
  double grad_norm = 0;  // before clipping
  double lr = 0;
};

/// One forward/backward/clip/update on a fixed batch.
template <class T>
class Trainer {
 public:
  Trainer(model::LanguageModel<T>& model, TrainConfig config);

  StepStats step(const data::TokenBatch& batch, std::size_t step_index);

  const TrainConfig& config() const { return config_; }

 private:
  model::LanguageModel<T>& model_;
  TrainConfig config_;
  AdamW<T> optimizer_;
};

struct LogRow {
  std::size_t step = 0;
  double train_loss = 0;
  double val_loss = 0;  // NaN when not evaluated at this step
  std::uint64_t tokens = 0;
  double seconds = 0;
};

struct TrainOptions {
  std::filesystem::path log_csv;         // empty: no CSV
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  std::function<void(const LogRow&)> on_row;
};

struct TrainResult {
  std::vector<LogRow> rows;
  double final_train_loss = 0;
  double final_val_loss = 0;
};

/// Trains on the leading part of `stream` and validates on its trailing
/// validation_fraction. Batches at step s come from Rng(seed).fork(s), so the
/// run is a pure function of (model init, stream, config).
template <class T>
TrainResult train(model::LanguageModel<T>& model, const data::TokenStream& stream,
                  const TrainConfig& config, const TrainOptions& options = {});

/// Mean loss over n sampled batches, no dropout.
template <class T>
double eval_loss(const model::LanguageModel<T>& model, const data::TokenStream& stream,
                 std::size_t n_batches, std::size_t batch, std::size_t seq, Rng& rng);

inline constexpr const char* kTrainCsvHeader = "step,train_loss,val_loss,tokens,seconds";

}  // namespace crate::train
