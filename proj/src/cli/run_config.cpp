#include "crate/cli/run_config.hpp"

#include <fstream>
#include <set>

#include "crate/data/synthetic.hpp"
#include "crate/lab/excerpts.hpp"
#include "crate/numerics/error.hpp"

namespace crate::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void reject_unknown(const json& j, const json& defaults, const std::string& section) {
  require(j.is_object(), "bad_config", section + " must be an object");
  for (const auto& [key, value] : j.items())
    require(defaults.contains(key), "unknown_key", "unknown " + section + " key '" + key + "'");
}

template <class T>
void get(const json& j, const char* key, T& field) {
  if (j.contains(key)) j.at(key).get_to(field);
}

json data_json(const DataSection& d) {
  return {{"path", d.path},
          {"format", d.format},
          {"synthetic_bytes", d.synthetic_bytes},
          {"synthetic_seed", d.synthetic_seed}};
}

json dump_json(const DumpSection& d) {
  return {{"layers", d.layers}, {"n_excerpts", d.n_excerpts}, {"excerpt_len", d.excerpt_len}};
}

json sae_json(const SaeSection& s) {
  json j = s.config;
  j["layer"] = s.layer;
  j["recovery_batches"] = s.recovery_batches;
  j["recovery_batch"] = s.recovery_batch;
  j["recovery_seq"] = s.recovery_seq;
  return j;
}

json interp_json(const InterpSection& s) {
  return {{"metric", s.metric},   {"backend", s.backend},     {"sample", s.sample},
          {"workers", s.workers}, {"hist_bins", s.hist_bins}, {"endpoint", s.endpoint}};
}

json steer_json(const SteerSection& s) {
  return {{"layer", s.layer},
          {"neuron", s.neuron},
          {"value", s.value},
          {"prompt", s.prompt},
          {"prompt_ids", s.prompt_ids},
          {"all_positions", s.all_positions},
          {"top_k", s.top_k}};
}

}  // namespace

void RunConfig::validate() const {
  require(precision == "f32" || precision == "f64", "bad_config", "precision must be f32 or f64");
  require(data.format == "bytes" || data.format == "pretokenized", "bad_config",
          "data.format must be bytes or pretokenized");
  require(!data.path.empty() || data.synthetic_bytes > 0, "bad_config",
          "data needs a path or synthetic_bytes > 0");
  model.validate();
  train.validate();
  require(dump.n_excerpts > 0 && dump.excerpt_len > 0, "bad_config",
          "dump sizes must be positive");
  for (auto l : dump.layers)
    require(l < model.n_layer, "bad_config", "dump layer " + std::to_string(l) + " out of range");
  sae.config.validate();
  lab::MetricConfig::named(interp.metric);
  static const std::set<std::string> backends{"replay", "negated", "constant", "noise", "llm"};
  require(backends.count(interp.backend) > 0, "bad_config",
          "interp.backend must be replay|negated|constant|noise|llm");
  require(interp.workers >= 1 && interp.hist_bins >= 1, "bad_config",
          "interp workers and hist_bins must be positive");
  interp.endpoint.validate();
  require(steer.top_k >= 1, "bad_config", "steer.top_k must be positive");
}

void to_json(json& j, const RunConfig& c) {
  j = {{"seed", c.seed},
       {"precision", c.precision},
       {"data", data_json(c.data)},
       {"model", c.model},
       {"train", c.train},
       {"dump", dump_json(c.dump)},
       {"sae", sae_json(c.sae)},
       {"interp", interp_json(c.interp)},
       {"steer", steer_json(c.steer)}};
}

void from_json(const json& j, RunConfig& c) {
  const json defaults = c;
  reject_unknown(j, defaults, "config");
  get(j, "seed", c.seed);
  get(j, "precision", c.precision);
  if (j.contains("data")) {
    const auto& s = j["data"];
    reject_unknown(s, defaults["data"], "data");
    get(s, "path", c.data.path);
    get(s, "format", c.data.format);
    get(s, "synthetic_bytes", c.data.synthetic_bytes);
    get(s, "synthetic_seed", c.data.synthetic_seed);
  }
  if (j.contains("model")) j["model"].get_to(c.model);
  if (j.contains("train")) j["train"].get_to(c.train);
  if (j.contains("dump")) {
    const auto& s = j["dump"];
    reject_unknown(s, defaults["dump"], "dump");
    get(s, "layers", c.dump.layers);
    get(s, "n_excerpts", c.dump.n_excerpts);
    get(s, "excerpt_len", c.dump.excerpt_len);
  }
  if (j.contains("sae")) {
    json rest = j["sae"];
    require(rest.is_object(), "bad_config", "sae must be an object");
    for (const char* key : {"layer", "recovery_batches", "recovery_batch", "recovery_seq"}) {
      if (!rest.contains(key)) continue;
      const std::string k = key;
      if (k == "layer") rest[k].get_to(c.sae.layer);
      if (k == "recovery_batches") rest[k].get_to(c.sae.recovery_batches);
      if (k == "recovery_batch") rest[k].get_to(c.sae.recovery_batch);
      if (k == "recovery_seq") rest[k].get_to(c.sae.recovery_seq);
      rest.erase(k);
    }
    rest.get_to(c.sae.config);
  }
  if (j.contains("interp")) {
    const auto& s = j["interp"];
    reject_unknown(s, defaults["interp"], "interp");
    get(s, "metric", c.interp.metric);
    get(s, "backend", c.interp.backend);
    get(s, "sample", c.interp.sample);
    get(s, "workers", c.interp.workers);
    get(s, "hist_bins", c.interp.hist_bins);
    if (s.contains("endpoint")) s["endpoint"].get_to(c.interp.endpoint);
  }
  if (j.contains("steer")) {
    const auto& s = j["steer"];
    reject_unknown(s, defaults["steer"], "steer");
    get(s, "layer", c.steer.layer);
    get(s, "neuron", c.steer.neuron);
    get(s, "value", c.steer.value);
    get(s, "prompt", c.steer.prompt);
    get(s, "prompt_ids", c.steer.prompt_ids);
    get(s, "all_positions", c.steer.all_positions);
    get(s, "top_k", c.steer.top_k);
  }
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  require(eq != std::string::npos && eq > 0, "bad_argument",
          "override must look like key.path=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &doc;
  std::size_t pos = 0;
  for (;;) {
    const auto dot = path.find('.', pos);
    const std::string key = path.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    require(!key.empty(), "bad_argument", "empty key in override " + path);
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    pos = dot + 1;
  }
}

RunConfig resolve_config(const std::optional<fs::path>& file,
                         const std::vector<std::string>& overrides,
                         std::optional<std::uint64_t> seed) {
  json doc = json::object();
  if (file) {
    std::ifstream is(*file);
    require(static_cast<bool>(is), "io_error", "cannot read config " + file->string());
    doc = json::parse(is, nullptr, false);
    require(!doc.is_discarded(), "bad_config", "config " + file->string() + " is not valid JSON");
  }
  for (const auto& o : overrides) apply_override(doc, o);
  if (seed) doc["seed"] = *seed;
  RunConfig c;
  try {
    doc.get_to(c);
  } catch (const nlohmann::json::exception& e) {
    throw Error("bad_config", e.what());
  }
  c.train.seed = c.seed;
  c.sae.config.seed = c.seed;
  c.validate();
  return c;
}

data::TokenStream load_corpus(const DataSection& d) {
  if (!d.path.empty()) return data::load_stream(d.path, d.format);
  return data::encode_bytes(data::synthetic_text(d.synthetic_bytes, d.synthetic_seed),
                            "synthetic:" + std::to_string(d.synthetic_seed));
}

}  // namespace crate::cli
