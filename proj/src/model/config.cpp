#include "crate/model/config.hpp"

#include <set>

#include "crate/numerics/error.hpp"

namespace crate::model {

std::string_view arch_name(Arch arch) { return arch == Arch::kCrate ? "crate" : "gpt"; }

Arch parse_arch(std::string_view name) {
  if (name == "crate") return Arch::kCrate;
  if (name == "gpt") return Arch::kGpt;
  throw Error("bad_config", "unknown arch '" + std::string(name) + "' (expected crate|gpt)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error("bad_config", msg); };
  if (d_model == 0 || n_head == 0) fail("d_model and n_head must be positive");
  if (d_model % n_head != 0) fail("d_model must be divisible by n_head");
  if (n_layer == 0) fail("n_layer must be at least 1");
  if (d_hidden != 4 * d_model) fail("d_hidden must equal 4 * d_model");
  if (vocab_size == 0 || context == 0) fail("vocab_size and context must be positive");
  if (ista_iters == 0) fail("ista_iters must be at least 1");
  if (!(ista_step > 0.0)) fail("ista_step must be positive");
  if (!(ista_lambda >= 0.0)) fail("ista_lambda must be non-negative");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  if (!(rate_eps > 0.0)) fail("rate_eps must be positive");
}

ModelConfig ModelConfig::preset(std::string_view name, Arch arch) {
  ModelConfig c;
  c.arch = arch;
  c.vocab_size = 50257;
  c.context = 1024;
  if (name == "1L" || name == "2L" || name == "3L") {
    c.d_model = 128;
    c.n_head = 4;
    c.n_layer = static_cast<std::size_t>(name[0] - '0');
  } else if (name == "S") {
    c.d_model = 768;
    c.n_head = 12;
    c.n_layer = 6;
  } else if (name == "B") {
    c.d_model = 768;
    c.n_head = 12;
    c.n_layer = 12;
  } else {
    throw Error("bad_config", "unknown preset '" + std::string(name) + "'");
  }
  c.d_hidden = 4 * c.d_model;
  return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"arch", arch_name(c.arch)},
                     {"d_model", c.d_model},
                     {"n_head", c.n_head},
                     {"n_layer", c.n_layer},
                     {"d_hidden", c.d_hidden},
                     {"vocab_size", c.vocab_size},
                     {"context", c.context},
                     {"ista_step", c.ista_step},
                     {"ista_lambda", c.ista_lambda},
                     {"ista_iters", c.ista_iters},
                     {"dropout", c.dropout},
                     {"rate_eps", c.rate_eps}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  static const std::set<std::string> known = {
      "arch",       "d_model",   "n_head",     "n_layer",    "d_hidden", "vocab_size",
      "context",    "ista_step", "ista_lambda", "ista_iters", "dropout",  "rate_eps"};
  require(j.is_object(), "bad_config", "model config must be an object");
  for (const auto& [key, value] : j.items())
    require(known.count(key) > 0, "unknown_key", "unknown model key '" + key + "'");
  if (j.contains("arch")) c.arch = parse_arch(j.at("arch").get<std::string>());
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("d_model", c.d_model);
  get("n_head", c.n_head);
  get("n_layer", c.n_layer);
  get("vocab_size", c.vocab_size);
  get("context", c.context);
  get("ista_step", c.ista_step);
  get("ista_lambda", c.ista_lambda);
  get("ista_iters", c.ista_iters);
  get("dropout", c.dropout);
  get("rate_eps", c.rate_eps);
  if (j.contains("d_hidden"))
    j.at("d_hidden").get_to(c.d_hidden);
  else
    c.d_hidden = 4 * c.d_model;
}

ParamCount count_params(const ModelConfig& config) {
  config.validate();
  const std::uint64_t d = config.d_model;
  const std::uint64_t h = config.d_hidden;
  ParamCount count;
  count.token_embedding = config.vocab_size * d;
  count.position_embedding = config.context * d;
  count.final_norm = 2 * d;
  const std::uint64_t norms = 4 * d;  // ln1 + ln2, gain and bias each
  if (config.arch == Arch::kCrate) {
    count.attention_input_weights = d * d;  // tied U, no bias
    count.mlp_weights = d * h;              // dictionary D, no bias
    count.per_layer = norms + count.attention_input_weights + (d * d + d) + count.mlp_weights;
  } else {
    count.attention_input_weights = 3 * d * d;
    count.mlp_weights = 2 * d * h;
    count.per_layer = norms + (count.attention_input_weights + 3 * d) + (d * d + d) +
                      (count.mlp_weights + h + d);
  }
  count.total = count.token_embedding + count.position_embedding +
                config.n_layer * count.per_layer + count.final_norm;
  return count;
}

}  // namespace crate::model
