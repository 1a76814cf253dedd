#include "crate/interp/llm_backend.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <openssl/evp.h>

#include "crate/interp/scoring.hpp"
#include "crate/numerics/error.hpp"

namespace crate::interp {

void EndpointConfig::validate() const {
  require(!base_url.empty(), "bad_config", "interp endpoint base_url is empty");
  require(temperature >= 0, "bad_config", "temperature must be >= 0");
  require(backoff_initial_s >= 0 && backoff_max_s >= backoff_initial_s, "bad_config",
          "backoff bounds must satisfy 0 <= initial <= max");
  require(max_in_flight >= 1, "bad_config", "max_in_flight must be >= 1");
  require(requests_per_minute >= 0, "bad_config", "requests_per_minute must be >= 0");
  require(timeout_s > 0, "bad_config", "timeout_s must be positive");
  require(token_format == "bytes" || token_format == "ids", "bad_config",
          "token_format must be bytes or ids");
}

void to_json(nlohmann::json& j, const EndpointConfig& c) {
  j = {{"base_url", c.base_url},
       {"path", c.path},
       {"model", c.model},
       {"api_key_env", c.api_key_env},
       {"temperature", c.temperature},
       {"max_retries", c.max_retries},
       {"backoff_initial_s", c.backoff_initial_s},
       {"backoff_max_s", c.backoff_max_s},
       {"max_in_flight", c.max_in_flight},
       {"requests_per_minute", c.requests_per_minute},
       {"timeout_s", c.timeout_s},
       {"cache_path", c.cache_path},
       {"offline", c.offline},
       {"token_format", c.token_format}};
}

void from_json(const nlohmann::json& j, EndpointConfig& c) {
  require(j.is_object(), "bad_config", "endpoint config must be an object");
  const nlohmann::json defaults = c;
  for (const auto& [key, value] : j.items())
    require(defaults.contains(key), "unknown_key", "unknown endpoint key '" + key + "'");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("base_url", c.base_url);
  get("path", c.path);
  get("model", c.model);
  get("api_key_env", c.api_key_env);
  get("temperature", c.temperature);
  get("max_retries", c.max_retries);
  get("backoff_initial_s", c.backoff_initial_s);
  get("backoff_max_s", c.backoff_max_s);
  get("max_in_flight", c.max_in_flight);
  get("requests_per_minute", c.requests_per_minute);
  get("timeout_s", c.timeout_s);
  get("cache_path", c.cache_path);
  get("offline", c.offline);
  get("token_format", c.token_format);
}

std::string render_token(std::uint32_t token, std::string_view format) {
  if (format == "ids" || token > 255) return "<" + std::to_string(token) + ">";
  const auto c = static_cast<unsigned char>(token);
  if (c == '\t') return "\\t";
  if (c == '\n') return "\\n";
  if (c == '\r') return "\\r";
  if (c == '\\') return "\\\\";
  if (c >= 32 && c < 127) return std::string(1, static_cast<char>(c));
  char buf[8];
  std::snprintf(buf, sizeof buf, "\\x%02X", c);
  return buf;
}

std::string explanation_prompt(const std::vector<ExplanationExcerpt>& excerpts,
                               std::string_view format) {
  std::ostringstream os;
  os << "Below are text excerpts with the activation of one neuron on every token, "
        "as \"token<TAB>level\" lines with levels from 0 to 10.\n\n";
  for (std::size_t i = 0; i < excerpts.size(); ++i) {
    os << "Excerpt " << (i + 1) << ":\n";
    const auto& e = excerpts[i];
    for (std::size_t t = 0; t < e.tokens.size(); ++t)
      os << render_token(e.tokens[t], format) << '\t' << e.levels[t] << '\n';
    os << '\n';
  }
  os << "In one sentence, what does this neuron respond to?\nExplanation:";
  return os.str();
}

std::string simulation_prompt(const std::string& explanation,
                              const std::vector<std::uint32_t>& tokens, std::string_view format) {
  std::ostringstream os;
  os << "A neuron is explained as: " << explanation << "\n\n"
     << "Predict its activation on each token below as an integer from 0 to 10. Reply with "
     << tokens.size() << " lines, one per token in order, each \"token<TAB>level\".\n\n";
  for (auto t : tokens) os << render_token(t, format) << '\n';
  return os.str();
}

std::optional<std::vector<double>> parse_levels(std::string_view response, std::size_t n) {
  std::vector<double> out;
  out.reserve(n);
  std::size_t pos = 0;
  while (out.size() < n && pos <= response.size()) {
    auto end = response.find('\n', pos);
    if (end == std::string_view::npos) end = response.size();
    std::string_view line = response.substr(pos, end - pos);
    pos = end + 1;
    const auto tab = line.rfind('\t');
    if (tab != std::string_view::npos) line = line.substr(tab + 1);
    const auto digit =
        std::find_if(line.begin(), line.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
    if (digit == line.end()) continue;
    long v = 0;
    for (auto it = digit; it != line.end() && std::isdigit(static_cast<unsigned char>(*it)); ++it)
      v = std::min<long>(v * 10 + (*it - '0'), 1000);
    out.push_back(static_cast<double>(std::clamp<long>(v, 0, kMaxLevel)));
    if (end == response.size()) break;
  }
  if (out.size() < n) return std::nullopt;
  return out;
}

std::optional<std::string> parse_explanation(std::string_view response) {
  std::istringstream is{std::string(response)};
  std::string line;
  while (std::getline(is, line)) {
    auto trim = [](std::string& s) {
      const auto b = s.find_first_not_of(" \t\r\"");
      const auto e = s.find_last_not_of(" \t\r\"");
      s = b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    trim(line);
    const std::string prefix = "explanation:";
    if (line.size() >= prefix.size()) {
      std::string head = line.substr(0, prefix.size());
      std::transform(head.begin(), head.end(), head.begin(),
                     [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
      if (head == prefix) {
        line = line.substr(prefix.size());
        trim(line);
      }
    }
    if (!line.empty()) return line;
  }
  return std::nullopt;
}

std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  require(EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) == 1,
          "internal", "sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

LlmBackend::LlmBackend(EndpointConfig config, Logger warn)
    : config_(std::move(config)), warn_(std::move(warn)) {
  config_.validate();
  if (!warn_) warn_ = [](const std::string& m) { std::cerr << "warning: " << m << "\n"; };
  if (!config_.offline && !config_.api_key_env.empty()) {
    const char* key = std::getenv(config_.api_key_env.c_str());
    require(key != nullptr, "missing_api_key",
            "environment variable " + config_.api_key_env + " is not set");
    api_key_ = key;
  }
  if (config_.cache_path.empty()) return;
  std::ifstream is(config_.cache_path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("key") || !j.contains("response")) {
      warn_("skipping unreadable cache line " + std::to_string(lineno));
      continue;
    }
    if (j.value("ok", false))
      cache_[j.at("key").get<std::string>()] = j.at("response").get<std::string>();
  }
}

std::string LlmBackend::explain(const NeuronRef&,
                                const std::vector<ExplanationExcerpt>& excerpts) {
  std::string explanation;
  complete("You explain the behavior of neurons in a language model.",
           explanation_prompt(excerpts, config_.token_format), [&](const std::string& content) {
             auto e = parse_explanation(content);
             if (!e) return false;
             explanation = std::move(*e);
             return true;
           });
  return explanation;
}

std::vector<double> LlmBackend::simulate(const SimulationRequest& request) {
  std::vector<double> levels;
  complete("You predict the activations of a language-model neuron from its explanation.",
           simulation_prompt(request.explanation, request.tokens, config_.token_format),
           [&](const std::string& content) {
             auto l = parse_levels(content, request.tokens.size());
             if (!l) return false;
             levels = std::move(*l);
             return true;
           });
  return levels;
}

void LlmBackend::complete(const std::string& system, const std::string& user,
                          const Parser& accept) {
  const nlohmann::json request = {
      {"model", config_.model},
      {"temperature", config_.temperature},
      {"messages",
       {{{"role", "system"}, {"content", system}}, {{"role", "user"}, {"content", user}}}}};
  const std::string body = request.dump();
  const std::string key = sha256_hex(body);

  {
    std::optional<std::string> cached;
    {
      std::lock_guard lock(cache_mu_);
      if (auto it = cache_.find(key); it != cache_.end()) cached = it->second;
    }
    if (cached && accept(*cached)) {
      ++cache_hits_;
      return;
    }
  }
  require(!config_.offline, "cache_miss", "request " + key.substr(0, 12) + " is not cached");

  std::string code = "backend_exhausted";
  std::string last;
  for (std::size_t attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) {
      const double wait = std::min(config_.backoff_max_s,
                                   config_.backoff_initial_s * std::ldexp(1.0, static_cast<int>(attempt) - 1));
      std::this_thread::sleep_for(std::chrono::duration<double>(wait));
    }
    acquire_slot();
    std::string error;
    std::optional<std::string> content;
    try {
      content = post(body, &error);
    } catch (...) {
      release_slot();
      throw;
    }
    release_slot();
    ++network_calls_;
    if (!content) {
      code = "backend_exhausted";
      last = error;
      warn_("attempt " + std::to_string(attempt + 1) + " failed: " + error);
      continue;
    }
    if (accept(*content)) {
      record(key, body, *content, true);
      return;
    }
    record(key, body, *content, false);
    code = "unparseable_response";
    last = "malformed response";
    warn_("attempt " + std::to_string(attempt + 1) + ": malformed response, retrying");
  }
  throw Error(code, "giving up after " + std::to_string(config_.max_retries + 1) +
                        " attempts: " + last);
}

std::optional<std::string> LlmBackend::post(const std::string& body, std::string* error) {
  httplib::Client cli(config_.base_url);
  const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(
      std::chrono::duration<double>(config_.timeout_s));
  cli.set_connection_timeout(timeout);
  cli.set_read_timeout(timeout);
  cli.set_write_timeout(timeout);
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
  auto res = cli.Post(config_.path, headers, body, "application/json");
  if (!res) {
    *error = "transport error: " + httplib::to_string(res.error());
    return std::nullopt;
  }
  if (res->status != 200) {
    *error = "HTTP " + std::to_string(res->status);
    return std::nullopt;
  }
  const auto j = nlohmann::json::parse(res->body, nullptr, false);
  if (j.is_discarded() || !j.contains("choices") || !j["choices"].is_array() ||
      j["choices"].empty() || !j["choices"][0].contains("message") ||
      !j["choices"][0]["message"].contains("content") ||
      !j["choices"][0]["message"]["content"].is_string()) {
    *error = "response is not a chat completion";
    return std::nullopt;
  }
  return j["choices"][0]["message"]["content"].get<std::string>();
}

void LlmBackend::record(const std::string& key, const std::string& body,
                        const std::string& content, bool ok) {
  std::lock_guard lock(cache_mu_);
  if (ok) cache_[key] = content;
  if (config_.cache_path.empty()) return;
  std::ofstream os(config_.cache_path, std::ios::app);
  require(static_cast<bool>(os), "io_error", "cannot append to " + config_.cache_path);
  os << nlohmann::json{{"key", key}, {"ok", ok}, {"request", body}, {"response", content}}.dump()
     << "\n";
}

void LlmBackend::acquire_slot() {
  std::chrono::steady_clock::time_point start;
  {
    std::unique_lock lock(slot_mu_);
    slot_cv_.wait(lock, [&] { return in_flight_ < config_.max_in_flight; });
    ++in_flight_;
    start = std::max(std::chrono::steady_clock::now(), next_start_);
    if (config_.requests_per_minute > 0)
      next_start_ = start + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                std::chrono::duration<double>(60.0 / config_.requests_per_minute));
  }
  std::this_thread::sleep_until(start);
}

void LlmBackend::release_slot() {
  {
    std::lock_guard lock(slot_mu_);
    --in_flight_;
  }
  slot_cv_.notify_one();
}

}  // namespace crate::interp
