#pragma once

#include <string>

#include "iftk/backend.hpp"
#include "iftk/tokenizer.hpp"
#include "iftk/util.hpp"

namespace iftk {

enum class MockBehavior {
  fuse,           // combine the two sections of a fusion prompt into one task
  echo,           // "ECHO: " + user text
  append_suffix,  // user text + " " + suffix
  hash_text,      // short unique text derived from the request hash
};

struct MockBackendOptions {
  std::uint64_t seed = 7;
  double invalid_probability = 0.0;  // chance of answering with the reject sentinel
  MockBehavior behavior = MockBehavior::fuse;
  std::string suffix;                // for append_suffix
  PriceTable prices;                 // optional; cost 0 when absent
};

/// Offline completion backend. Every output is a pure function of the seed
/// and the request content, so runs are bit-reproducible and resumable
/// without a cache.
class MockBackend final : public CompletionBackend {
 public:
  using Behavior = MockBehavior;
  using Options = MockBackendOptions;

  explicit MockBackend(Options opts = Options(), SpendLedger* ledger = nullptr)
      : opts_(std::move(opts)), ledger_(ledger) {}

  BackendResult complete(const BackendRequest& req) override {
    req.check();
    if (req.kind != RequestKind::complete) {
      throw CapabilityError("MockBackend only serves completion requests");
    }
    if (ledger_ && ledger_->cap()) {
      Usage worst;
      worst.input_tokens = BuiltinTokenizer().count(req.system) + BuiltinTokenizer().count(req.user);
      worst.output_tokens = req.decoding.max_output_tokens;
      ledger_->check_affordable(opts_.prices.cost(req.model_id, worst));
    }
    const std::uint64_t h = mix64(opts_.seed, fnv1a64(req.to_json().dump()));
    BackendResult res;
    res.source = ResultSource::mock;
    if (opts_.invalid_probability > 0.0 && hash_unit(h) < opts_.invalid_probability) {
      res.text = "INVALID PROMPT";
    } else {
      // Honor the decoding token budget like a real endpoint would.
      res.text = BuiltinTokenizer::truncate(render(req, h), req.decoding.max_output_tokens);
    }
    BuiltinTokenizer tok;
    res.usage.input_tokens = tok.count(req.system) + tok.count(req.user);
    res.usage.output_tokens = tok.count(res.text);
    res.cost_estimate = opts_.prices.cost(req.model_id, res.usage);
    if (ledger_) ledger_->charge(res.cost_estimate);
    return res;
  }

  std::string id() const override {
    return "mock:seed=" + std::to_string(opts_.seed) +
           ",p_invalid=" + std::to_string(opts_.invalid_probability);
  }

  static Behavior behavior_from_string(const std::string& s) {
    if (s == "fuse") return Behavior::fuse;
    if (s == "echo") return Behavior::echo;
    if (s == "hash") return Behavior::hash_text;
    if (s.rfind("append:", 0) == 0) return Behavior::append_suffix;
    throw ConfigError("unknown mock behavior: " + s);
  }

 private:
  std::string render(const BackendRequest& req, std::uint64_t h) const {
    switch (opts_.behavior) {
      case Behavior::echo:
        return "ECHO: " + req.user;
      case Behavior::append_suffix:
        return req.user + " " + opts_.suffix;
      case Behavior::hash_text:
        return "MOCK-" + hex64(splitmix64(h));
      case Behavior::fuse:
        break;
    }
    // Pull the two sections out of a fusion prompt so children read like a
    // single combined task; fall back to a hash-tagged echo otherwise.
    const std::string& u = req.user;
    const std::string m1 = "#Given Prompt 1#:\n";
    const std::string m2 = "\n#Given Prompt 2#:\n";
    const std::string m3 = "\n#Fused Prompt#:";
    const std::size_t p1 = u.find(m1);
    const std::size_t p2 = u.find(m2);
    const std::size_t p3 = u.rfind(m3);
    if (p1 == std::string::npos || p2 == std::string::npos || p3 == std::string::npos ||
        p2 < p1 || p3 < p2) {
      return "MOCK-" + hex64(splitmix64(h)) + ": " + u.substr(0, 60);
    }
    const std::string i1 = u.substr(p1 + m1.size(), p2 - (p1 + m1.size()));
    const std::string i2 = u.substr(p2 + m2.size(), p3 - (p2 + m2.size()));
    return "Write a single program that satisfies both requirements. First: " + i1 +
           " Second: " + i2;
  }

  Options opts_;
  SpendLedger* ledger_ = nullptr;
};

struct MockScorerOptions {
  double base = 1.0;
  double per_response_token = 0.0;
  double per_instruction_token = 0.0;
  double content_noise = 0.0;
  std::uint64_t seed = 1;
};

/// Closed-form scorer for tests and offline analysis:
///   nll = base + per_response_token * T_resp + per_instruction_token * T_instr
///         + content_noise * hash_unit(instruction)
class MockScorer final : public ScoringBackend {
 public:
  using Options = MockScorerOptions;

  explicit MockScorer(Options opts = Options()) : opts_(opts) {}

  LossScore score(const std::string& instruction, const std::string& response) override {
    if (response.empty()) throw BackendError("score: empty response");
    BuiltinTokenizer tok;
    LossScore s;
    s.n_response_tokens = tok.count(response);
    s.mean_nll_per_token = opts_.base +
                           opts_.per_response_token * static_cast<double>(s.n_response_tokens) +
                           opts_.per_instruction_token * static_cast<double>(tok.count(instruction));
    if (opts_.content_noise != 0.0) {
      s.mean_nll_per_token +=
          opts_.content_noise * hash_unit(mix64(opts_.seed, fnv1a64(instruction)));
    }
    if (!(s.mean_nll_per_token > 0.0)) {
      throw BackendError("MockScorer: non-positive loss from configured coefficients");
    }
    return s;
  }

  std::string id() const override { return "mock-scorer"; }

 private:
  Options opts_;
};

}  // namespace iftk
