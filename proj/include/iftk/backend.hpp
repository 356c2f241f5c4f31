#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "iftk/errors.hpp"
#include "iftk/util.hpp"

namespace iftk {

enum class RequestKind { complete, score, embed };

inline std::string to_string(RequestKind k) {
  switch (k) {
    case RequestKind::complete: return "complete";
    case RequestKind::score: return "score";
    case RequestKind::embed: return "embed";
  }
  return "complete";
}

struct Decoding {
  double temperature = 0.0;
  std::size_t max_output_tokens = 2048;
};

/// One model exchange. The cache key is a pure function of every field.
struct BackendRequest {
  RequestKind kind = RequestKind::complete;
  std::string model_id;
  // complete
  std::string system;  // optional; empty means no system message
  std::string user;
  // score
  std::string instruction;
  std::string response;
  // embed
  std::vector<std::string> texts;
  Decoding decoding;

  /// Canonical serialization; key order is fixed by nlohmann::json (sorted).
  nlohmann::json to_json() const {
    nlohmann::json j{{"kind", to_string(kind)},
                     {"model_id", model_id},
                     {"temperature", decoding.temperature},
                     {"max_output_tokens", decoding.max_output_tokens}};
    switch (kind) {
      case RequestKind::complete:
        j["system"] = system;
        j["user"] = user;
        break;
      case RequestKind::score:
        j["instruction"] = instruction;
        j["response"] = response;
        break;
      case RequestKind::embed:
        j["texts"] = texts;
        break;
    }
    return j;
  }

  std::string content_hash() const { return content_hash_hex(to_json().dump()); }

  void check() const {
    bool has_payload = false;
    switch (kind) {
      case RequestKind::complete: has_payload = !user.empty(); break;
      case RequestKind::score: has_payload = !instruction.empty(); break;
      case RequestKind::embed: has_payload = !texts.empty(); break;
    }
    if (!has_payload) throw BackendError("BackendRequest: empty payload");
  }

  static BackendRequest complete_of(std::string model, std::string user_text,
                                    Decoding dec = {}, std::string system_text = {}) {
    BackendRequest r;
    r.kind = RequestKind::complete;
    r.model_id = std::move(model);
    r.user = std::move(user_text);
    r.system = std::move(system_text);
    r.decoding = dec;
    return r;
  }
};

struct Usage {
  std::size_t input_tokens = 0;
  std::size_t output_tokens = 0;
};

enum class ResultSource { live, cache, mock };

inline std::string to_string(ResultSource s) {
  switch (s) {
    case ResultSource::live: return "live";
    case ResultSource::cache: return "cache";
    case ResultSource::mock: return "mock";
  }
  return "live";
}

/// Mean response NLL per token, conditioned on the instruction.
struct LossScore {
  double mean_nll_per_token = 0.0;
  std::size_t n_response_tokens = 0;
};

struct BackendResult {
  std::string text;
  std::vector<std::vector<double>> vectors;  // embed results
  std::optional<LossScore> score;            // score results
  Usage usage;
  double cost_estimate = 0.0;  // USD
  double latency_ms = 0.0;
  ResultSource source = ResultSource::live;

  nlohmann::json to_json() const {
    nlohmann::json j{{"text", text},
                     {"usage", {{"input_tokens", usage.input_tokens},
                                {"output_tokens", usage.output_tokens}}},
                     {"cost_estimate", cost_estimate}};
    if (!vectors.empty()) j["vectors"] = vectors;
    if (score) {
      j["score"] = {{"mean_nll_per_token", score->mean_nll_per_token},
                    {"n_response_tokens", score->n_response_tokens}};
    }
    return j;
  }

  static BackendResult from_json(const nlohmann::json& j) {
    BackendResult r;
    r.text = j.value("text", std::string());
    if (j.contains("usage")) {
      r.usage.input_tokens = j["usage"].value("input_tokens", std::size_t{0});
      r.usage.output_tokens = j["usage"].value("output_tokens", std::size_t{0});
    }
    r.cost_estimate = j.value("cost_estimate", 0.0);
    if (j.contains("vectors")) {
      r.vectors = j["vectors"].get<std::vector<std::vector<double>>>();
    }
    if (j.contains("score")) {
      LossScore s;
      s.mean_nll_per_token = j["score"].value("mean_nll_per_token", 0.0);
      s.n_response_tokens = j["score"].value("n_response_tokens", std::size_t{0});
      r.score = s;
    }
    return r;
  }
};

// ---------------------------------------------------------------------------
// Pricing and spend.
// ---------------------------------------------------------------------------

struct ModelPrice {
  double input_per_1k = 0.0;   // USD per 1000 input tokens
  double output_per_1k = 0.0;  // USD per 1000 output tokens
};

class PriceTable {
 public:
  void set(const std::string& model, ModelPrice p) {
    if (p.input_per_1k < 0 || p.output_per_1k < 0) {
      throw ConfigError("negative price for model " + model);
    }
    prices_[model] = p;
  }

  std::optional<ModelPrice> find(const std::string& model) const {
    auto it = prices_.find(model);
    if (it == prices_.end()) return std::nullopt;
    return it->second;
  }

  double cost(const std::string& model, const Usage& u) const {
    auto p = find(model);
    if (!p) return 0.0;
    return (static_cast<double>(u.input_tokens) * p->input_per_1k +
            static_cast<double>(u.output_tokens) * p->output_per_1k) /
           1000.0;
  }

  bool empty() const { return prices_.empty(); }

 private:
  std::map<std::string, ModelPrice> prices_;
};

/// Linear pre-flight cost model: n identical requests at average token sizes.
inline double estimate_cost(std::size_t n_requests, double avg_in_tokens,
                            double avg_out_tokens, const ModelPrice& price) {
  if (price.input_per_1k <= 0 && price.output_per_1k <= 0) {
    throw ConfigError("estimate_cost: prices must be positive");
  }
  return static_cast<double>(n_requests) *
         (avg_in_tokens * price.input_per_1k + avg_out_tokens * price.output_per_1k) / 1000.0;
}

/// Thread-safe running total of per-call cost estimates, with an optional cap.
/// `charge` is called after a call completes; `check_affordable` before one is
/// issued, with a worst-case projection, so the total never exceeds the cap.
class SpendLedger {
 public:
  explicit SpendLedger(std::optional<double> cap_usd = std::nullopt) : cap_(cap_usd) {}

  void charge(double cost_usd) {
    std::lock_guard<std::mutex> lock(mu_);
    total_ += cost_usd;
    ++calls_;
  }

  /// Carries spend recorded by an earlier invocation into this ledger, so a
  /// resumed job keeps accumulating against the same cap.
  void seed_total(double prior_spend_usd) {
    std::lock_guard<std::mutex> lock(mu_);
    total_ += prior_spend_usd;
  }

  void check_affordable(double projected_cost_usd) const {
    if (!cap_) return;
    std::lock_guard<std::mutex> lock(mu_);
    if (total_ + projected_cost_usd > *cap_) {
      throw SpendCapError("spend cap " + std::to_string(*cap_) +
                          " USD would be exceeded (spent " + std::to_string(total_) +
                          ", next call up to " + std::to_string(projected_cost_usd) + ")");
    }
  }

  double total() const {
    std::lock_guard<std::mutex> lock(mu_);
    return total_;
  }

  std::size_t calls() const {
    std::lock_guard<std::mutex> lock(mu_);
    return calls_;
  }

  std::optional<double> cap() const { return cap_; }

 private:
  mutable std::mutex mu_;
  double total_ = 0.0;
  std::size_t calls_ = 0;
  std::optional<double> cap_;
};

// ---------------------------------------------------------------------------
// Backend interfaces. Implementations must be safe for concurrent use.
// ---------------------------------------------------------------------------

class CompletionBackend {
 public:
  virtual ~CompletionBackend() = default;
  virtual BackendResult complete(const BackendRequest& req) = 0;
  virtual std::string id() const = 0;
};

class ScoringBackend {
 public:
  virtual ~ScoringBackend() = default;
  /// mean_nll_per_token = -(1/T) sum_t log p(token_t | instruction, tokens_<t)
  virtual LossScore score(const std::string& instruction, const std::string& response) = 0;
  virtual std::string id() const = 0;
};

class EmbeddingBackend {
 public:
  virtual ~EmbeddingBackend() = default;
  /// One L2-normalized vector per text; all vectors share one dimension.
  virtual std::vector<std::vector<double>> embed(const std::vector<std::string>& texts) = 0;
  virtual std::string id() const = 0;
};

inline void l2_normalize(std::vector<double>& v) {
  double norm_sq = 0.0;
  for (double x : v) norm_sq += x * x;
  if (norm_sq <= 0.0) {
    // Degenerate (e.g. empty text under a sparse featureizer): pin to a unit
    // basis vector so the row-norm contract still holds.
    if (!v.empty()) v[0] = 1.0;
    return;
  }
  const double inv = 1.0 / std::sqrt(norm_sq);
  for (double& x : v) x *= inv;
}

}  // namespace iftk
