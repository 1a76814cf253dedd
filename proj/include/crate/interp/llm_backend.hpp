#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "crate/interp/backend.hpp"

namespace crate::interp {

/// Chat-completion endpoint settings.
struct EndpointConfig {
  std::string base_url = "http://127.0.0.1:8000";
  std::string path = "/v1/chat/completions";
  std::string model = "mistral-7b-instruct";
  std::string api_key_env = "OPENAI_API_KEY";  // empty = send no key
  double temperature = 0.0;
  std::size_t max_retries = 4;  // attempts after the first
  double backoff_initial_s = 0.5;
  double backoff_max_s = 8.0;
  std::size_t max_in_flight = 4;
  double requests_per_minute = 60;  // 0 = unlimited
  double timeout_s = 60;
  std::string cache_path;  // append-only JSONL replay cache; empty = none
  bool offline = false;    // cache misses are errors instead of requests
  std::string token_format = "bytes";  // bytes | ids

  void validate() const;
};

void to_json(nlohmann::json& j, const EndpointConfig& c);
void from_json(const nlohmann::json& j, EndpointConfig& c);

/// A byte token as readable text (escapes for tab, newline, and non-printables),
/// or "<id>" under the ids format.
std::string render_token(std::uint32_t token, std::string_view format);

/// Explanation prompt: each excerpt as "token<TAB>level" lines.
std::string explanation_prompt(const std::vector<ExplanationExcerpt>& excerpts,
                               std::string_view format);
/// Simulation prompt: the explanation, then one numbered token per line.
std::string simulation_prompt(const std::string& explanation,
                              const std::vector<std::uint32_t>& tokens, std::string_view format);

/// First integer on each of the first n nonblank lines (after the last tab when
/// a line has one), clamped to 0..10. nullopt when a line has no integer or
/// there are fewer than n lines.
std::optional<std::vector<double>> parse_levels(std::string_view response, std::size_t n);
/// First nonblank line with any "Explanation:" prefix removed; nullopt if empty.
std::optional<std::string> parse_explanation(std::string_view response);

std::string sha256_hex(std::string_view data);

/// Backend over an HTTP chat-completion endpoint.
///
/// Every exchange is appended to the replay cache keyed by the SHA-256 of the
/// request body; requests already cached with a valid response are answered
/// from the cache without touching the network. Failed or unparseable
/// exchanges are retried with exponential backoff up to max_retries. Requests
/// share one max-in-flight limit and one requests-per-minute budget.
class LlmBackend final : public Backend {
 public:
  using Logger = std::function<void(const std::string&)>;

  explicit LlmBackend(EndpointConfig config, Logger warn = {});

  std::string explain(const NeuronRef& neuron,
                      const std::vector<ExplanationExcerpt>& excerpts) override;
  std::vector<double> simulate(const SimulationRequest& request) override;

  std::size_t network_calls() const { return network_calls_.load(); }
  std::size_t cache_hits() const { return cache_hits_.load(); }

 private:
  using Parser = std::function<bool(const std::string& content)>;

  void complete(const std::string& system, const std::string& user, const Parser& accept);
  std::optional<std::string> post(const std::string& body, std::string* error);
  void record(const std::string& key, const std::string& body, const std::string& content,
              bool ok);
  void acquire_slot();
  void release_slot();

  EndpointConfig config_;
  Logger warn_;
  std::string api_key_;

  std::mutex cache_mu_;
  std::map<std::string, std::string> cache_;

  std::mutex slot_mu_;
  std::condition_variable slot_cv_;
  std::size_t in_flight_ = 0;
  std::chrono::steady_clock::time_point next_start_{};

  std::atomic<std::size_t> network_calls_{0};
  std::atomic<std::size_t> cache_hits_{0};
};

}  // namespace crate::interp
