#include "crate/cli/app.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <regex>

#include "crate/cli/run_config.hpp"
#include "crate/data/token_stream.hpp"
#include "crate/interp/backend.hpp"
#include "crate/interp/llm_backend.hpp"
#include "crate/interp/scoring.hpp"
#include "crate/lab/dump.hpp"
#include "crate/lab/steer.hpp"
#include "crate/model/checkpoint.hpp"
#include "crate/model/diagnostics.hpp"
#include "crate/numerics/error.hpp"
#include "crate/sae/sae.hpp"
#include "crate/train/trainer.hpp"

namespace crate::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Seed-stream tags, so each subcommand draws from its own generator.
enum : std::uint64_t {
  kInitStream = 1,
  kEvalStream = 2,
  kDumpStream = 3,
  kSaeStream = 4,
  kRecoveryStream = 5,
  kScoreStream = 6,
  kCausalityStream = 7,
};

struct Context {
  RunConfig cfg;
  fs::path out_dir;
  std::optional<fs::path> model_dir;
  std::optional<fs::path> dumps_dir;
  std::optional<fs::path> sae_dir;
  std::optional<std::string> preset;
  std::size_t trials = 200;
  std::ostream& out;
  std::ostream& err;

  Rng rng(std::uint64_t stream) const { return Rng(cfg.seed).fork(stream); }

  const fs::path& need(const std::optional<fs::path>& p, const char* flag) const {
    require(p.has_value(), "bad_argument", std::string("this subcommand needs ") + flag);
    return *p;
  }
};

template <class F>
decltype(auto) with_precision(const std::string& precision, F&& f) {
  if (precision == "f64") return f.template operator()<double>();
  return f.template operator()<float>();
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  require(static_cast<bool>(os), "io_error", "cannot write " + path.string());
  os << j.dump(2) << "\n";
}

std::vector<lab::ActivationDump> read_dumps(const fs::path& dir) {
  require(fs::is_directory(dir), "io_error", "no dump directory " + dir.string());
  static const std::regex name("layer_([0-9]+)\\.act");
  std::vector<lab::ActivationDump> dumps;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!std::regex_match(entry.path().filename().string(), name)) continue;
    dumps.push_back(lab::read_dump(entry.path()));
  }
  require(!dumps.empty(), "bad_dump", "no layer_<l>.act files in " + dir.string());
  std::sort(dumps.begin(), dumps.end(),
            [](const auto& a, const auto& b) { return a.layer < b.layer; });
  return dumps;
}

std::string model_id(const fs::path& dir, const model::ModelConfig& c) {
  auto p = dir.lexically_normal();
  if (p.filename().empty()) p = p.parent_path();
  return std::string(model::arch_name(c.arch)) + ":" + p.string();
}

int cmd_train(Context& ctx) {
  const auto stream = load_corpus(ctx.cfg.data);
  require(stream.vocab.size <= ctx.cfg.model.vocab_size, "bad_config",
          "model.vocab_size is smaller than the corpus vocabulary");
  return with_precision(ctx.cfg.precision, [&]<class T>() {
    Rng init = ctx.rng(kInitStream);
    auto net = model::make_model<T>(ctx.cfg.model, init);
    train::TrainOptions opts;
    opts.log_csv = ctx.out_dir / "train.csv";
    opts.checkpoint_dir = ctx.out_dir / "checkpoint";
    opts.on_row = [&](const train::LogRow& r) {
      ctx.err << "step " << r.step << " train_loss " << r.train_loss;
      if (!std::isnan(r.val_loss)) ctx.err << " val_loss " << r.val_loss;
      ctx.err << "\n";
    };
    const auto res = train::train(*net, stream, ctx.cfg.train, opts);
    const json summary = {{"steps", ctx.cfg.train.steps},
                          {"final_train_loss", res.final_train_loss},
                          {"final_val_loss", res.final_val_loss},
                          {"unigram_entropy", data::unigram_entropy(stream)},
                          {"checkpoint", (opts.checkpoint_dir / "final").string()}};
    write_json(ctx.out_dir / "train_summary.json", summary);
    ctx.out << summary.dump() << "\n";
    return kExitOk;
  });
}

int cmd_eval_loss(Context& ctx) {
  const auto& dir = ctx.need(ctx.model_dir, "--model");
  const auto stream = load_corpus(ctx.cfg.data);
  const auto split = data::split_stream(stream, ctx.cfg.train.validation_fraction);
  return with_precision(ctx.cfg.precision, [&]<class T>() {
    auto net = model::load_model<T>(dir);
    const std::size_t seq = std::min(ctx.cfg.train.seq, net->config().context);
    Rng rng = ctx.rng(kEvalStream);
    const auto& tc = ctx.cfg.train;
    const double val = train::eval_loss(*net, split.validation, tc.eval_batches, tc.batch, seq, rng);
    const double trn = train::eval_loss(*net, split.train, tc.eval_batches, tc.batch, seq, rng);
    const json result = {{"val_loss", val},
                         {"train_loss", trn},
                         {"unigram_entropy", data::unigram_entropy(split.validation)}};
    write_json(ctx.out_dir / "eval.json", result);
    ctx.out << result.dump() << "\n";
    return kExitOk;
  });
}

int cmd_dump(Context& ctx) {
  const auto& dir = ctx.need(ctx.model_dir, "--model");
  const auto stream = load_corpus(ctx.cfg.data);
  const auto split = data::split_stream(stream, ctx.cfg.train.validation_fraction);
  return with_precision(ctx.cfg.precision, [&]<class T>() {
    auto net = model::load_model<T>(dir);
    auto layers = ctx.cfg.dump.layers;
    if (layers.empty())
      for (std::size_t l = 0; l < net->config().n_layer; ++l) layers.push_back(l);
    Rng rng = ctx.rng(kDumpStream);
    const auto paths =
        lab::dump_activations(*net, split.validation, layers, ctx.cfg.dump.n_excerpts,
                              ctx.cfg.dump.excerpt_len, rng, ctx.out_dir,
                              model_id(dir, net->config()));
    for (const auto& p : paths) ctx.out << p.string() << "\n";
    return kExitOk;
  });
}

int cmd_sparsity(Context& ctx) {
  const auto dumps = read_dumps(ctx.need(ctx.dumps_dir, "--dumps"));
  const auto rows = lab::sparsity_report(dumps);
  lab::write_sparsity_csv(ctx.out_dir / "sparsity.csv", rows);
  ctx.out << lab::kSparsityCsvHeader << "\n";
  for (const auto& r : rows) ctx.out << r.layer << ',' << r.zero_fraction << ',' << r.entries << "\n";
  return kExitOk;
}

int cmd_steer(Context& ctx) {
  const auto& dir = ctx.need(ctx.model_dir, "--model");
  const auto& s = ctx.cfg.steer;
  return with_precision(ctx.cfg.precision, [&]<class T>() {
    auto net = model::load_model<T>(dir);
    std::vector<std::uint32_t> prompt = s.prompt_ids;
    if (prompt.empty()) {
      require(net->config().vocab_size >= 256, "bad_config",
              "text prompts need a byte vocabulary; use steer.prompt_ids");
      for (unsigned char c : s.prompt) prompt.push_back(c);
    }
    for (auto t : prompt)
      require(t < net->config().vocab_size, "token_out_of_range", "prompt token out of range");
    const auto r = lab::steer(*net, s.layer, s.neuron, s.value, prompt,
                              {.all_positions = s.all_positions, .top_k = s.top_k});
    const auto vocab = net->config().vocab_size >= 256 && s.prompt_ids.empty()
                           ? data::Vocab::bytes()
                           : data::Vocab::external(static_cast<std::uint32_t>(net->config().vocab_size));
    json top = json::array();
    for (const auto& d : r.top)
      top.push_back({{"token", d.token},
                     {"text", data::render_token(d.token, vocab)},
                     {"prob_delta", d.prob_delta},
                     {"logit_delta", d.logit_delta}});
    const json result = {{"layer", s.layer},
                         {"neuron", s.neuron},
                         {"value", s.value},
                         {"original_activation", r.original_activation},
                         {"all_positions", s.all_positions},
                         {"top", top}};
    write_json(ctx.out_dir / "steer.json", result);
    ctx.out << result.dump(2) << "\n";
    return kExitOk;
  });
}

const lab::ActivationDump& dump_for_layer(const std::vector<lab::ActivationDump>& dumps,
                                          std::size_t layer) {
  for (const auto& d : dumps)
    if (d.layer == layer) return d;
  throw Error("bad_dump", "no dump for layer " + std::to_string(layer));
}

int cmd_sae_train(Context& ctx) {
  const auto dumps = read_dumps(ctx.need(ctx.dumps_dir, "--dumps"));
  const auto samples = sae::dump_samples(dump_for_layer(dumps, ctx.cfg.sae.layer));
  Rng rng = ctx.rng(kSaeStream);
  auto res = sae::train_sae(samples, ctx.cfg.sae.config, rng, ctx.out_dir / "sae_train.csv");
  auto config = ctx.cfg.sae.config;
  config.input_dim = res.params.input_dim();
  sae::save_sae(ctx.out_dir / "sae", res.params, config, config.steps);
  const auto& last = res.log.back();
  const json summary = {{"layer", ctx.cfg.sae.layer},
                        {"samples", samples.rows()},
                        {"final_mse", last.mse},
                        {"final_l1", last.l1},
                        {"dead_fraction", last.dead_fraction},
                        {"resamples", res.resamples.size()},
                        {"checkpoint", (ctx.out_dir / "sae").string()}};
  write_json(ctx.out_dir / "sae_summary.json", summary);
  ctx.out << summary.dump() << "\n";
  return kExitOk;
}

int cmd_sae_recovery(Context& ctx) {
  const auto& dir = ctx.need(ctx.model_dir, "--model");
  const auto params = sae::load_sae(ctx.need(ctx.sae_dir, "--sae"));
  const auto stream = load_corpus(ctx.cfg.data);
  const auto split = data::split_stream(stream, ctx.cfg.train.validation_fraction);
  const auto& s = ctx.cfg.sae;
  return with_precision(ctx.cfg.precision, [&]<class T>() {
    auto net = model::load_model<T>(dir);
    Rng rng = ctx.rng(kRecoveryStream);
    const std::size_t seq = std::min(s.recovery_seq, net->config().context);
    const auto r = sae::recovery_score(*net, s.layer, params, split.validation, s.recovery_batches,
                                       s.recovery_batch, seq, rng);
    const json result = {{"layer", s.layer},
                         {"loss_base", r.loss_base},
                         {"loss_patch", r.loss_patch},
                         {"loss_zero", r.loss_zero},
                         {"recovery_score", r.score}};
    write_json(ctx.out_dir / "recovery.json", result);
    ctx.out << result.dump() << "\n";
    return kExitOk;
  });
}

int cmd_interp_score(Context& ctx) {
  const auto dumps = read_dumps(ctx.need(ctx.dumps_dir, "--dumps"));
  std::size_t n_layer = ctx.cfg.model.n_layer;
  if (ctx.model_dir) {
    model::ModelConfig mc;
    model::read_checkpoint(*ctx.model_dir).config.get_to(mc);
    n_layer = mc.n_layer;
  }
  const auto& ic = ctx.cfg.interp;
  std::unique_ptr<interp::Backend> backend;
  interp::LlmBackend* llm = nullptr;
  if (ic.backend == "llm") {
    auto b = std::make_unique<interp::LlmBackend>(
        ic.endpoint, [&](const std::string& w) { ctx.err << "warning: " << w << "\n"; });
    llm = b.get();
    backend = std::move(b);
  } else {
    backend = interp::mock_backend(ic.backend, ctx.cfg.seed, dumps);
  }
  Rng rng = ctx.rng(kScoreStream);
  const auto score =
      interp::score_model(dumps, n_layer, lab::MetricConfig::named(ic.metric), *backend,
                          {.sample = ic.sample, .workers = ic.workers, .hist_bins = ic.hist_bins},
                          rng);
  interp::write_score_csv(ctx.out_dir / "scores.csv", score);
  interp::write_histogram_json(ctx.out_dir / "histogram.json", score);
  interp::write_neuron_jsonl(ctx.out_dir / "neurons.jsonl", score);
  if (llm)
    ctx.err << "llm network_calls " << llm->network_calls() << " cache_hits " << llm->cache_hits()
            << "\n";
  ctx.out << interp::kScoreCsvHeader << "\n";
  ctx.out << std::setprecision(17);
  for (const auto& l : score.layers)
    ctx.out << l.layer << ',' << l.mean_rho << ',' << l.n_ok << ',' << l.n_undefined << "\n";
  return kExitOk;
}

json count_json(const model::ModelConfig& c) {
  const auto p = model::count_params(c);
  return {{"arch", model::arch_name(c.arch)},
          {"total", p.total},
          {"reported", p.without_position()},
          {"reported_millions", static_cast<double>(p.without_position()) / 1e6},
          {"without_position", p.without_position()},
          {"per_layer", p.per_layer},
          {"attention_input_weights", p.attention_input_weights},
          {"mlp_weights", p.mlp_weights},
          {"token_embedding", p.token_embedding},
          {"position_embedding", p.position_embedding},
          {"final_norm", p.final_norm}};
}

int cmd_params(Context& ctx) {
  json rows = json::array();
  for (auto arch : {model::Arch::kCrate, model::Arch::kGpt}) {
    model::ModelConfig c = ctx.cfg.model;
    if (ctx.preset) {
      c = model::ModelConfig::preset(*ctx.preset, arch);
    } else {
      c.arch = arch;
    }
    const auto j = count_json(c);
    rows.push_back(j);
    ctx.out << j["arch"].get<std::string>() << " reported=" << j["reported"].get<std::uint64_t>()
            << " (" << std::fixed << std::setprecision(2) << j["reported_millions"].get<double>()
            << "M) total_with_position=" << j["total"].get<std::uint64_t>()
            << std::defaultfloat << " per_layer=" << j["per_layer"].get<std::uint64_t>()
            << " attention_input=" << j["attention_input_weights"].get<std::uint64_t>()
            << " mlp=" << j["mlp_weights"].get<std::uint64_t>() << "\n";
  }
  write_json(ctx.out_dir / "params.json", {{"preset", ctx.preset.value_or("")}, {"counts", rows}});
  return kExitOk;
}

int cmd_selfcheck(Context& ctx) {
  bool ok = true;
  const auto failures = interp::check_metric_table();
  ctx.out << "metric_table " << (failures.empty() ? "PASS" : "FAIL") << "\n";
  for (const auto& f : failures) ctx.out << "  " << f << "\n";
  ok = ok && failures.empty();

  Rng rng = ctx.rng(kCausalityStream);
  std::size_t passed = 0;
  for (std::size_t i = 0; i < ctx.trials; ++i) {
    std::string what;
    if (model::causality_trial(rng, &what))
      ++passed;
    else
      ctx.out << "  causality violated: " << what << "\n";
  }
  ctx.out << "causality " << (passed == ctx.trials ? "PASS" : "FAIL") << " " << passed << "/"
          << ctx.trials << "\n";
  ok = ok && passed == ctx.trials;
  require(ok, "selfcheck_failed", "selfcheck assertions failed");
  return kExitOk;
}

void report(std::ostream& err, const std::string& code, const std::string& message) {
  err << "error code=" << code << " message=" << json(message).dump() << "\n";
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"CRATE language-model toolkit", "crate"};
  app.require_subcommand(1);
  app.fallthrough();

  std::optional<std::string> config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "crate_out";
  std::optional<std::string> model_dir, dumps_dir, sae_dir, preset;
  std::size_t trials = 200;
  app.add_option("--config", config_file, "JSON run config");
  app.add_option("--set", overrides, "Override a config value: dotted.key=value (repeatable)");
  app.add_option("--seed", seed, "Override the config seed");
  app.add_option("--out", out_dir, "Output directory")->capture_default_str();
  app.add_option("--model", model_dir, "Model checkpoint directory");
  app.add_option("--dumps", dumps_dir, "Activation dump directory");
  app.add_option("--sae", sae_dir, "SAE checkpoint directory");

  using Command = int (*)(Context&);
  const std::vector<std::tuple<const char*, const char*, Command>> commands = {
      {"train", "Train a model; writes train.csv and checkpoint/", cmd_train},
      {"eval-loss", "Validation and training loss of a checkpoint", cmd_eval_loss},
      {"dump", "Dump hidden activations of a checkpoint", cmd_dump},
      {"sparsity", "Zero fraction of dumped activations per layer", cmd_sparsity},
      {"steer", "Set one neuron and report the next-token change", cmd_steer},
      {"sae-train", "Train a sparse autoencoder on a layer dump", cmd_sae_train},
      {"sae-recovery", "Loss recovered by an SAE reconstruction", cmd_sae_recovery},
      {"interp-score", "Explain-and-simulate interpretability scores", cmd_interp_score},
      {"params", "Parameter counts of both architectures", cmd_params},
      {"selfcheck", "Metric-table and causality assertions", cmd_selfcheck},
  };
  std::map<const CLI::App*, Command> handlers;
  for (const auto& [name, help, fn] : commands) {
    auto* sub = app.add_subcommand(name, help);
    handlers[sub] = fn;
    if (std::string(name) == "params") sub->add_option("--preset", preset, "1L | 2L | 3L | S | B");
    if (std::string(name) == "selfcheck")
      sub->add_option("--trials", trials, "Causality trials")->capture_default_str();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    report(err, "bad_argument", e.what());
    return kExitUser;
  }

  try {
    const auto* sub = app.get_subcommands().front();
    std::optional<fs::path> file;
    if (config_file) file = *config_file;
    Context ctx{resolve_config(file, overrides, seed), out_dir, {}, {}, {}, preset, trials, out,
                err};
    if (model_dir) ctx.model_dir = *model_dir;
    if (dumps_dir) ctx.dumps_dir = *dumps_dir;
    if (sae_dir) ctx.sae_dir = *sae_dir;
    const json resolved = ctx.cfg;
    err << "config " << resolved.dump() << "\n";
    fs::create_directories(ctx.out_dir);
    write_json(ctx.out_dir / "config.json", resolved);
    return handlers.at(sub)(ctx);
  } catch (const Error& e) {
    report(err, e.code(), e.what());
    return kExitUser;
  } catch (const nlohmann::json::exception& e) {
    report(err, "bad_config", e.what());
    return kExitUser;
  } catch (const std::exception& e) {
    report(err, "internal", e.what());
    return kExitInternal;
  }
}

}  // namespace crate::cli
