#pragma once

#include <chrono>
#include <cstdlib>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "iftk/backend.hpp"
#include "iftk/clock.hpp"
#include "iftk/rate_limiter.hpp"
#include "iftk/retry.hpp"
#include "iftk/tokenizer.hpp"

namespace iftk {

struct HttpBackendConfig {
  std::string endpoint = "https://api.openai.com/v1";
  std::string api_key_env = "OPENAI_API_KEY";
  std::string model = "gpt-4-1106-preview";
  RetryPolicy retry;
  std::size_t rate_limit_requests = 60;
  std::int64_t rate_limit_window_ms = 60000;
  std::size_t max_in_flight = 4;
  std::size_t max_response_bytes = 8 * 1024 * 1024;
  std::int64_t timeout_s = 120;
  PriceTable prices;
};

/// Chat-completion, logprob-scoring, and embedding client for the de-facto
/// OpenAI-compatible REST shapes. Rate limiting, retry with backoff, spend
/// accounting, and the in-flight bound all live here; callers never see HTTP.
class HttpBackend final : public CompletionBackend,
                          public ScoringBackend,
                          public EmbeddingBackend {
 public:
  HttpBackend(HttpBackendConfig cfg, SpendLedger* ledger = nullptr,
              Clock& clock = SystemClock::instance())
      : cfg_(std::move(cfg)),
        ledger_(ledger),
        clock_(clock),
        limiter_(cfg_.rate_limit_requests, cfg_.rate_limit_window_ms, clock),
        in_flight_(cfg_.max_in_flight) {
    split_endpoint(cfg_.endpoint, host_, path_prefix_);
    if (!cfg_.api_key_env.empty()) {
      if (const char* v = std::getenv(cfg_.api_key_env.c_str())) api_key_ = v;
    }
  }

  BackendResult complete(const BackendRequest& req) override {
    req.check();
    nlohmann::json messages = nlohmann::json::array();
    if (!req.system.empty()) {
      messages.push_back({{"role", "system"}, {"content", req.system}});
    }
    messages.push_back({{"role", "user"}, {"content", req.user}});
    nlohmann::json body{{"model", req.model_id.empty() ? cfg_.model : req.model_id},
                        {"messages", messages},
                        {"temperature", req.decoding.temperature},
                        {"max_tokens", req.decoding.max_output_tokens}};

    guard_spend(req.system + req.user, req.decoding.max_output_tokens, body["model"]);
    const auto t0 = std::chrono::steady_clock::now();
    nlohmann::json payload = post_json("/chat/completions", body);
    BackendResult res;
    res.source = ResultSource::live;
    res.latency_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - t0)
                         .count();
    try {
      res.text = payload.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw BackendError(std::string("malformed chat completion response: ") + e.what());
    }
    read_usage(payload, res);
    res.cost_estimate = cfg_.prices.cost(body["model"], res.usage);
    if (ledger_) ledger_->charge(res.cost_estimate);
    return res;
  }

  LossScore score(const std::string& instruction, const std::string& response) override {
    if (instruction.empty()) throw BackendError("score: empty instruction");
    if (response.empty()) throw BackendError("score: empty response");
    // Echoed-prompt logprobs: score the concatenation, then keep only tokens
    // that start at or after the response boundary.
    const std::string prompt = instruction + response;
    nlohmann::json body{{"model", cfg_.model}, {"prompt", prompt}, {"max_tokens", 0},
                        {"echo", true},        {"logprobs", 0}};
    guard_spend(prompt, 0, cfg_.model);
    nlohmann::json payload = post_json("/completions", body);

    nlohmann::json lp;
    try {
      lp = payload.at("choices").at(0).at("logprobs");
    } catch (const nlohmann::json::exception&) {
      throw CapabilityError("scoring backend did not return logprobs");
    }
    if (lp.is_null() || !lp.contains("token_logprobs") || !lp.contains("text_offset")) {
      throw CapabilityError("scoring backend did not return logprobs");
    }
    const auto& logprobs = lp["token_logprobs"];
    const auto& offsets = lp["text_offset"];
    if (!logprobs.is_array() || !offsets.is_array() || logprobs.size() != offsets.size()) {
      throw BackendError("malformed logprobs payload");
    }
    double nll_sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < logprobs.size(); ++i) {
      const std::size_t off = offsets[i].get<std::size_t>();
      if (off < instruction.size()) continue;  // instruction prefix token
      if (logprobs[i].is_null()) {
        throw CapabilityError("backend returned null logprob inside the response span");
      }
      nll_sum -= logprobs[i].get<double>();
      ++n;
    }
    if (n == 0) throw BackendError("no response tokens found in logprob payload");

    BackendResult res;
    read_usage(payload, res);
    if (ledger_) ledger_->charge(cfg_.prices.cost(cfg_.model, res.usage));
    LossScore s;
    s.mean_nll_per_token = nll_sum / static_cast<double>(n);
    s.n_response_tokens = n;
    return s;
  }

  std::vector<std::vector<double>> embed(const std::vector<std::string>& texts) override {
    if (texts.empty()) return {};
    nlohmann::json body{{"model", cfg_.model}, {"input", texts}};
    std::string joined;
    for (const auto& t : texts) joined += t;
    guard_spend(joined, 0, cfg_.model);
    nlohmann::json payload = post_json("/embeddings", body);
    std::vector<std::vector<double>> out(texts.size());
    try {
      for (const auto& item : payload.at("data")) {
        const std::size_t idx = item.value("index", out.size());
        if (idx >= out.size()) throw BackendError("embedding index out of range");
        out[idx] = item.at("embedding").get<std::vector<double>>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw BackendError(std::string("malformed embeddings response: ") + e.what());
    }
    std::size_t dim = 0;
    for (auto& v : out) {
      if (v.empty()) throw BackendError("embeddings response missing a vector");
      if (dim == 0) dim = v.size();
      if (v.size() != dim) throw BackendError("embedding dimension mismatch within batch");
      l2_normalize(v);
    }
    BackendResult res;
    read_usage(payload, res);
    if (ledger_) ledger_->charge(cfg_.prices.cost(cfg_.model, res.usage));
    return out;
  }

  std::string id() const override { return "http:" + cfg_.endpoint + ":" + cfg_.model; }

 private:
  static void split_endpoint(const std::string& endpoint, std::string& host,
                             std::string& path_prefix) {
    const std::size_t scheme = endpoint.find("://");
    if (scheme == std::string::npos) throw ConfigError("endpoint must include a scheme: " + endpoint);
    const std::size_t slash = endpoint.find('/', scheme + 3);
    if (slash == std::string::npos) {
      host = endpoint;
      path_prefix.clear();
    } else {
      host = endpoint.substr(0, slash);
      path_prefix = endpoint.substr(slash);
      while (!path_prefix.empty() && path_prefix.back() == '/') path_prefix.pop_back();
    }
  }

  void guard_spend(const std::string& input_text, std::size_t max_out,
                   const std::string& model) {
    if (!ledger_ || !ledger_->cap()) return;
    Usage worst;
    worst.input_tokens = BuiltinTokenizer().count(input_text);
    worst.output_tokens = max_out;
    ledger_->check_affordable(cfg_.prices.cost(model, worst));
  }

  static bool retryable_status(int status) {
    return status == 408 || status == 429 || status >= 500;
  }

  nlohmann::json post_json(const std::string& path, const nlohmann::json& body) {
    auto token = in_flight_.enter();
    const std::string body_str = body.dump();
    auto attempt = [&]() -> nlohmann::json {
      limiter_.acquire();
      httplib::Client cli(host_);
      cli.set_connection_timeout(cfg_.timeout_s, 0);
      cli.set_read_timeout(cfg_.timeout_s, 0);
      httplib::Headers headers;
      if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
      auto res = cli.Post(path_prefix_ + path, headers, body_str, "application/json");
      if (!res) {
        throw BackendError("transport error calling " + path + ": " + httplib::to_string(res.error()),
                           /*retryable=*/true);
      }
      if (res->status >= 400) {
        std::string msg = "HTTP " + std::to_string(res->status) + " from " + path;
        if (auto parsed = nlohmann::json::parse(res->body, nullptr, false); !parsed.is_discarded()) {
          if (parsed.contains("error") && parsed["error"].is_object()) {
            msg += ": " + parsed["error"].value("message", std::string());
          }
        }
        throw BackendError(msg, retryable_status(res->status));
      }
      if (res->body.size() > cfg_.max_response_bytes) {
        throw BackendError("response exceeds size cap (" + std::to_string(res->body.size()) +
                           " bytes)");
      }
      nlohmann::json parsed = nlohmann::json::parse(res->body, nullptr, false);
      if (parsed.is_discarded()) throw BackendError("response is not valid JSON");
      return parsed;
    };
    return with_retries(attempt, cfg_.retry, clock_);
  }

  static void read_usage(const nlohmann::json& payload, BackendResult& res) {
    if (payload.contains("usage") && payload["usage"].is_object()) {
      res.usage.input_tokens = payload["usage"].value("prompt_tokens", std::size_t{0});
      res.usage.output_tokens = payload["usage"].value("completion_tokens", std::size_t{0});
    }
  }

  HttpBackendConfig cfg_;
  SpendLedger* ledger_;
  Clock& clock_;
  RateLimiter limiter_;
  InFlightLimiter in_flight_;
  std::string host_;
  std::string path_prefix_;
  std::string api_key_;
};

}  // namespace iftk
