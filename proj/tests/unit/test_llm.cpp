#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <regex>
#include <sstream>
#include <thread>

#include "crate/interp/llm_backend.hpp"
#include "crate/interp/scoring.hpp"
#include "crate/numerics/error.hpp"
#include "support.hpp"

// After Eigen: resolv.h, pulled in by httplib, defines a _res macro.
#include <httplib.h>

using namespace crate;
using namespace crate::interp;

namespace {

template <class F>
std::string error_code(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string completion(const std::string& content) {
  return nlohmann::json{{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}}}
      .dump();
}

// Well-behaved answer: an explanation, or one "token<TAB>level" line per token
// with levels following the token's position.
std::string valid_reply(const std::string& user) {
  std::smatch m;
  static const std::regex reply_with("Reply with ([0-9]+) lines");
  if (!std::regex_search(user, m, reply_with)) return "Explanation: fires on vowels";
  const int n = std::stoi(m[1]);
  std::string out;
  for (int i = 0; i < n; ++i) out += "x\t" + std::to_string((i * 7 + n) % 11) + "\n";
  return out;
}

// In-process chat-completion server on an ephemeral port.
class FakeEndpoint {
 public:
  std::function<std::pair<int, std::string>(const std::string& user, int call)> reply =
      [](const std::string& user, int) { return std::make_pair(200, completion(valid_reply(user))); };
  std::atomic<int> calls{0};
  std::atomic<int> active{0};
  std::atomic<int> max_active{0};
  std::atomic<int> bad_requests{0};
  int delay_ms = 0;
  std::string expected_auth;

  FakeEndpoint() {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      const int now = ++active;
      int prev = max_active.load();
      while (now > prev && !max_active.compare_exchange_weak(prev, now)) {}
      const int call = calls++;
      const auto j = nlohmann::json::parse(req.body, nullptr, false);
      if (j.is_discarded() || j.value("temperature", -1.0) != 0.0 || j["messages"].size() != 2 ||
          (!expected_auth.empty() && req.get_header_value("Authorization") != expected_auth))
        ++bad_requests;
      const std::string user = j.is_discarded() ? "" : j["messages"][1]["content"].get<std::string>();
      if (delay_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
      auto [status, body] = reply(user, call);
      res.status = status;
      res.set_content(body, "application/json");
      --active;
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeEndpoint() { stop(); }

  void stop() {
    if (!thread_.joinable()) return;
    server_.stop();
    thread_.join();
  }

  EndpointConfig config(const std::filesystem::path& cache = {}) const {
    EndpointConfig c;
    c.base_url = "http://127.0.0.1:" + std::to_string(port_);
    c.api_key_env = "";
    c.backoff_initial_s = 0.001;
    c.backoff_max_s = 0.004;
    c.requests_per_minute = 0;
    c.timeout_s = 5;
    c.cache_path = cache.string();
    return c;
  }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

SimulationRequest request(std::size_t n_tokens) {
  SimulationRequest r;
  r.explanation = "fires on vowels";
  for (std::size_t i = 0; i < n_tokens; ++i) r.tokens.push_back(static_cast<std::uint32_t>('a' + i));
  return r;
}

}  // namespace

TEST(LlmParse, LevelsAreLenient) {
  const auto l = parse_levels("here you go\na\t3\nb\t 7 (high)\nc\t42\n", 3);
  ASSERT_TRUE(l.has_value());
  EXPECT_EQ(*l, (std::vector<double>{3, 7, 10}));
  EXPECT_FALSE(parse_levels("a\t3\n", 2).has_value());
  EXPECT_EQ(*parse_levels("5 9\n2\n", 2), (std::vector<double>{5, 2}));
}

TEST(LlmParse, ExplanationStripsPrefix) {
  EXPECT_EQ(*parse_explanation("\n  Explanation: the letter e\nmore"), "the letter e");
  EXPECT_EQ(*parse_explanation("commas"), "commas");
  EXPECT_FALSE(parse_explanation(" \n\t\n").has_value());
}

TEST(LlmParse, Sha256KnownVector) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(LlmPrompt, TokensAndLevelsAreTabSeparated) {
  const std::vector<ExplanationExcerpt> ex{{{'h', 'i', '\t', 300}, {0, 10, 2, 5}}};
  const auto p = explanation_prompt(ex, "bytes");
  EXPECT_NE(p.find("h\t0\ni\t10\n\\t\t2\n<300>\t5\n"), std::string::npos);
  const auto s = simulation_prompt("vowels", {'a', 'b'}, "ids");
  EXPECT_NE(s.find("vowels"), std::string::npos);
  EXPECT_NE(s.find("<97>\n<98>\n"), std::string::npos);
  EXPECT_NE(s.find("Reply with 2 lines"), std::string::npos);
}

TEST(LlmConfig, StrictJson) {
  EndpointConfig c;
  EXPECT_EQ(error_code([&] { nlohmann::json{{"modle", "x"}}.get_to(c); }), "unknown_key");
  nlohmann::json{{"model", "m"}, {"max_retries", 2}}.get_to(c);
  EXPECT_EQ(c.model, "m");
  EXPECT_EQ(c.max_retries, 2u);
}

TEST(LlmBackend, ValidExchange) {
  FakeEndpoint server;
  setenv("CRATE_TEST_KEY", "secret", 1);
  server.expected_auth = "Bearer secret";
  auto cfg = server.config();
  cfg.api_key_env = "CRATE_TEST_KEY";
  LlmBackend backend(cfg);
  EXPECT_EQ(backend.explain({}, {{{'a'}, {10}}}), "fires on vowels");
  const auto levels = backend.simulate(request(4));
  EXPECT_EQ(levels.size(), 4u);
  EXPECT_EQ(backend.network_calls(), 2u);
  EXPECT_EQ(server.bad_requests.load(), 0);
}

TEST(LlmBackend, MissingKeyIsAnError) {
  unsetenv("CRATE_NO_SUCH_KEY");
  EndpointConfig c;
  c.api_key_env = "CRATE_NO_SUCH_KEY";
  EXPECT_EQ(error_code([&] { LlmBackend b(c); }), "missing_api_key");
}

TEST(LlmBackend, MalformedThenValidRetrySucceedsWithWarning) {
  FakeEndpoint server;
  server.reply = [](const std::string& user, int call) {
    if (call == 0) return std::make_pair(200, completion("I would rather not say."));
    return std::make_pair(200, completion(valid_reply(user)));
  };
  std::vector<std::string> warnings;
  LlmBackend backend(server.config(), [&](const std::string& w) { warnings.push_back(w); });
  const auto levels = backend.simulate(request(3));
  EXPECT_EQ(levels.size(), 3u);
  EXPECT_EQ(backend.network_calls(), 2u);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("malformed"), std::string::npos);
}

TEST(LlmBackend, PersistentlyMalformedExhaustsRetries) {
  FakeEndpoint server;
  server.reply = [](const std::string&, int) {
    return std::make_pair(200, completion("no numbers at all"));
  };
  auto cfg = server.config();
  cfg.max_retries = 3;
  LlmBackend backend(cfg, [](const std::string&) {});
  EXPECT_EQ(error_code([&] { backend.simulate(request(2)); }), "unparseable_response");
  EXPECT_EQ(server.calls.load(), 4);
}

TEST(LlmBackend, ServerErrorsExhaustRetries) {
  FakeEndpoint server;
  server.reply = [](const std::string&, int) { return std::make_pair(500, std::string("{}")); };
  auto cfg = server.config();
  cfg.max_retries = 2;
  LlmBackend backend(cfg, [](const std::string&) {});
  EXPECT_EQ(error_code([&] { backend.explain({}, {}); }), "backend_exhausted");
  EXPECT_EQ(server.calls.load(), 3);
}

TEST(LlmBackend, TransientServerErrorRecovers) {
  FakeEndpoint server;
  server.reply = [](const std::string& user, int call) {
    if (call < 2) return std::make_pair(429, std::string("{}"));
    return std::make_pair(200, completion(valid_reply(user)));
  };
  LlmBackend backend(server.config(), [](const std::string&) {});
  EXPECT_EQ(backend.explain({}, {}), "fires on vowels");
  EXPECT_EQ(backend.network_calls(), 3u);
}

TEST(LlmBackend, OfflineCacheMissIsAnError) {
  EndpointConfig c;
  c.offline = true;
  LlmBackend backend(c);
  EXPECT_EQ(error_code([&] { backend.simulate(request(1)); }), "cache_miss");
}

TEST(LlmBackend, CachedReplayIsBitwiseIdenticalWithZeroCalls) {
  const auto dir = testkit::temp_dir("llm_cache");
  const auto cache = dir / "cache.jsonl";
  const std::vector<lab::ActivationDump> dumps{testkit::synthetic_dump(0, 4, 64, 16, 3),
                                               testkit::synthetic_dump(1, 4, 64, 16, 4)};
  const auto metric = lab::MetricConfig::named("openai_tar");

  FakeEndpoint server;
  std::size_t live_requests = 0;  // identical requests repeat across neurons sharing excerpts
  {
    LlmBackend live(server.config(cache));
    Rng rng(21);
    const auto s = score_model(dumps, 3, metric, live, {.workers = 3}, rng);
    write_score_csv(dir / "live.csv", s);
    EXPECT_GT(live.network_calls(), 0u);
    live_requests = live.network_calls() + live.cache_hits();
  }
  const int live_calls = server.calls.load();
  server.stop();

  for (bool offline : {true, false}) {
    auto cfg = server.config(cache);
    cfg.offline = offline;
    LlmBackend replay(cfg);
    Rng rng(21);
    const auto s = score_model(dumps, 3, metric, replay, {.workers = 1}, rng);
    const auto name = std::string(offline ? "offline" : "online") + ".csv";
    write_score_csv(dir / name, s);
    EXPECT_EQ(replay.network_calls(), 0u);
    EXPECT_EQ(replay.cache_hits(), live_requests);
    EXPECT_EQ(slurp(dir / name), slurp(dir / "live.csv"));
  }

  // One JSON record per exchange, keyed by the request hash.
  std::ifstream is(cache);
  std::string line;
  int records = 0;
  while (std::getline(is, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["key"], sha256_hex(j["request"].get<std::string>()));
    EXPECT_TRUE(j["ok"].get<bool>());
    ++records;
  }
  EXPECT_EQ(records, live_calls);
}

TEST(LlmBackend, MaxInFlightIsShared) {
  FakeEndpoint server;
  server.delay_ms = 20;
  auto cfg = server.config();
  cfg.max_in_flight = 2;
  LlmBackend backend(cfg);
  std::vector<std::thread> pool;
  for (int t = 0; t < 6; ++t)
    pool.emplace_back([&, t] { backend.simulate(request(static_cast<std::size_t>(t + 1))); });
  for (auto& t : pool) t.join();
  EXPECT_EQ(server.calls.load(), 6);
  EXPECT_LE(server.max_active.load(), 2);
}

TEST(LlmBackend, RequestsPerMinuteBudget) {
  FakeEndpoint server;
  auto cfg = server.config();
  cfg.requests_per_minute = 600;  // one start every 100 ms
  LlmBackend backend(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 1; i <= 4; ++i) backend.simulate(request(i));
  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_GE(elapsed, 0.29);
}
