#include <doctest.h>

#include <atomic>
#include <memory>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "iftk/cache.hpp"
#include "iftk/http_backend.hpp"

using namespace iftk;
using nlohmann::json;

namespace {

/// In-process OpenAI-shaped server for exercising the live transport path.
class FakeServer {
 public:
  FakeServer() {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      ++chat_calls;
      last_auth = req.get_header_value("Authorization");
      if (fail_next > 0) {
        --fail_next;
        res.status = 500;
        res.set_content(R"({"error":{"message":"upstream exploded"}})", "application/json");
        return;
      }
      const json body = json::parse(req.body);
      last_model = body.value("model", "");
      last_user = body["messages"].back().value("content", "");
      json reply{{"choices", json::array({json{{"message", {{"role", "assistant"},
                                                            {"content", canned_text}}}}})},
                 {"usage", {{"prompt_tokens", 12}, {"completion_tokens", 7}}}};
      res.set_content(reply.dump(), "application/json");
    });

    server_.Post("/v1/completions", [this](const httplib::Request& req, httplib::Response& res) {
      ++score_calls;
      const json body = json::parse(req.body);
      const std::string prompt = body.value("prompt", "");
      json payload;
      if (!with_logprobs) {
        payload = {{"choices", json::array({json{{"text", ""}}})}};
      } else {
        // Two instruction tokens at offsets 0 and 1, two response tokens at
        // offsets 2 and 3 (instruction "ab", response "cd").
        payload = {{"choices",
                    json::array({json{{"text", ""},
                                      {"logprobs",
                                       {{"token_logprobs", {nullptr, -0.5, -2.0, -3.0}},
                                        {"text_offset", {0, 1, 2, 3}},
                                        {"tokens", {"a", "b", "c", "d"}}}}}})},
                   {"usage", {{"prompt_tokens", 4}, {"completion_tokens", 0}}}};
      }
      (void)prompt;
      res.set_content(payload.dump(), "application/json");
    });

    server_.Post("/v1/embeddings", [this](const httplib::Request& req, httplib::Response& res) {
      ++embed_calls;
      const json body = json::parse(req.body);
      const auto inputs = body["input"].get<std::vector<std::string>>();
      json data = json::array();
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        // Unnormalized on purpose; the client must L2-normalize.
        json vec = mismatch_dims && i == 1 ? json{3.0, 4.0, 0.0} : json{3.0, 4.0};
        data.push_back({{"index", i}, {"object", "embedding"}, {"embedding", vec}});
      }
      res.set_content(json{{"data", data}, {"usage", {{"prompt_tokens", 2}}}}.dump(),
                      "application/json");
    });

    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~FakeServer() {
    server_.stop();
    thread_.join();
  }

  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }

  HttpBackendConfig config() const {
    HttpBackendConfig cfg;
    cfg.endpoint = endpoint();
    cfg.api_key_env = "IFTK_TEST_KEY";
    cfg.model = "test-model";
    cfg.retry.max_attempts = 4;
    cfg.retry.base_delay_ms = 1;
    cfg.rate_limit_requests = 1000;
    cfg.rate_limit_window_ms = 1000;
    return cfg;
  }

  std::atomic<int> chat_calls{0};
  std::atomic<int> score_calls{0};
  std::atomic<int> embed_calls{0};
  std::atomic<int> fail_next{0};
  bool with_logprobs = true;
  bool mismatch_dims = false;
  std::string canned_text = "a canned completion";
  std::string last_auth;
  std::string last_model;
  std::string last_user;

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST_CASE("http backend: chat completion round trip with auth and pricing") {
  setenv("IFTK_TEST_KEY", "sk-test-123", 1);
  FakeServer server;
  HttpBackendConfig cfg = server.config();
  cfg.prices.set("test-model", {0.01, 0.03});
  SpendLedger ledger;
  HttpBackend be(cfg, &ledger);

  BackendRequest req = BackendRequest::complete_of("test-model", "hello there", {0.2, 64});
  BackendResult res = be.complete(req);
  CHECK(res.text == "a canned completion");
  CHECK(res.source == ResultSource::live);
  CHECK(res.usage.input_tokens == 12);
  CHECK(res.usage.output_tokens == 7);
  CHECK(res.cost_estimate == doctest::Approx((12 * 0.01 + 7 * 0.03) / 1000.0));
  CHECK(ledger.total() == doctest::Approx(res.cost_estimate));
  CHECK(server.last_auth == "Bearer sk-test-123");
  CHECK(server.last_model == "test-model");
  CHECK(server.last_user == "hello there");
}

TEST_CASE("http backend: transient 500s are retried, then succeed") {
  FakeServer server;
  server.fail_next = 2;
  HttpBackend be(server.config());
  BackendResult res = be.complete(BackendRequest::complete_of("test-model", "retry me"));
  CHECK(res.text == "a canned completion");
  CHECK(server.chat_calls == 3);
}

TEST_CASE("http backend: exhausted retries raise a transport error") {
  FakeServer server;
  server.fail_next = 99;
  HttpBackendConfig cfg = server.config();
  cfg.retry.max_attempts = 3;
  HttpBackend be(cfg);
  CHECK_THROWS_AS(be.complete(BackendRequest::complete_of("test-model", "doomed")),
                  BackendError);
  CHECK(server.chat_calls == 3);
}

TEST_CASE("http backend: connection refusal is a transport error after retries") {
  HttpBackendConfig cfg;
  cfg.endpoint = "http://127.0.0.1:1/v1";  // nothing listens here
  cfg.retry.max_attempts = 2;
  cfg.retry.base_delay_ms = 1;
  HttpBackend be(cfg);
  CHECK_THROWS_AS(be.complete(BackendRequest::complete_of("m", "x")), BackendError);
}

TEST_CASE("http backend: scoring via echoed logprobs keeps only response tokens") {
  FakeServer server;
  HttpBackend be(server.config());
  // Instruction "ab" (offsets 0,1 skipped), response "cd" (logprobs -2, -3).
  LossScore s = be.score("ab", "cd");
  CHECK(s.n_response_tokens == 2);
  CHECK(s.mean_nll_per_token == doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("http backend: missing logprob support is a capability error") {
  FakeServer server;
  server.with_logprobs = false;
  HttpBackend be(server.config());
  CHECK_THROWS_AS(be.score("ab", "cd"), CapabilityError);
  CHECK_THROWS_AS(be.score("ab", ""), BackendError);
}

TEST_CASE("http backend: embeddings are L2-normalized; dimension mismatch rejected") {
  FakeServer server;
  HttpBackend be(server.config());
  auto vs = be.embed({"one", "two"});
  REQUIRE(vs.size() == 2);
  // Server returns {3,4}; normalized to {0.6, 0.8}.
  CHECK(vs[0][0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(vs[0][1] == doctest::Approx(0.8).epsilon(1e-12));

  server.mismatch_dims = true;
  CHECK_THROWS_AS(be.embed({"one", "two"}), BackendError);
}

TEST_CASE("http backend: requests flow through the sliding-window rate limiter") {
  FakeServer server;
  HttpBackendConfig cfg = server.config();
  cfg.rate_limit_requests = 2;
  cfg.rate_limit_window_ms = 10000;
  MockClock clock;
  HttpBackend be(cfg, nullptr, clock);
  BackendRequest req = BackendRequest::complete_of("test-model", "ratelimited");
  be.complete(req);
  be.complete(req);
  CHECK(clock.now_ms() == 0);  // first two fit the window
  be.complete(req);            // third must wait out the window on the mock clock
  CHECK(clock.now_ms() >= 10000);
  CHECK(server.chat_calls == 3);
}

TEST_CASE("http backend: response over the size cap is an error") {
  FakeServer server;
  server.canned_text = std::string(512 * 1024, 'x');
  HttpBackendConfig cfg = server.config();
  cfg.max_response_bytes = 1024;
  HttpBackend be(cfg);
  CHECK_THROWS_AS(be.complete(BackendRequest::complete_of("test-model", "big")), BackendError);
}

TEST_CASE("http backend: recorded cache replays with no network available") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / ("iftk_replay_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  BackendRequest req = BackendRequest::complete_of("test-model", "record me", {0.3, 32});
  std::string recorded;
  {
    FakeServer server;
    HttpBackend live(server.config());
    RequestCache cache(dir);
    CachingBackend recording(live, cache);
    recorded = recording.complete(req).text;
  }
  // Server is gone; a replay-mode wrapper over a dead endpoint must still
  // serve the request purely from the cache.
  HttpBackendConfig dead;
  dead.endpoint = "http://127.0.0.1:1/v1";
  dead.retry.max_attempts = 1;
  HttpBackend unreachable(dead);
  RequestCache cache(dir);
  CachingBackend replay(unreachable, cache, CachingBackend::Mode::replay);
  const BackendResult hit = replay.complete(req);
  CHECK(hit.text == recorded);
  CHECK(hit.source == ResultSource::cache);
  fs::remove_all(dir);
}

TEST_CASE("http backend: spend cap refuses before issuing the request") {
  FakeServer server;
  HttpBackendConfig cfg = server.config();
  cfg.prices.set("test-model", {1.0, 1.0});
  SpendLedger ledger(0.0001);
  HttpBackend be(cfg, &ledger);
  CHECK_THROWS_AS(
      be.complete(BackendRequest::complete_of("test-model", "pricey words", {0.0, 4000})),
      SpendCapError);
  CHECK(server.chat_calls == 0);
}
