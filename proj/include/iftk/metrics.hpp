#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "iftk/backend.hpp"
#include "iftk/corpus.hpp"
#include "iftk/embedding.hpp"
#include "iftk/errors.hpp"
#include "iftk/tokenizer.hpp"

namespace iftk {

// ---------------------------------------------------------------------------
// Nearest-neighbor distances and the uniformity metric.
//
//   U  = (1/N) * sum_i (d_i - mu)^2          (population variance)
//   d_i = Euclidean distance from row i to its nearest other row
//   mu = (1/N) * sum_i d_i
//
// Lower U means the points cover their space more evenly; U = 0 exactly when
// every point sits at the same distance from its nearest neighbor.
// ---------------------------------------------------------------------------

struct NearestNeighborResult {
  std::vector<double> distances;     // d_i
  std::vector<std::size_t> nn_index; // index of the nearest other row; ties -> lowest index
};

/// Exact brute-force O(N^2 * D) scan. Nearest is decided on squared distance
/// accumulated in ascending coordinate order; ties break to the lowest index.
inline NearestNeighborResult nearest_neighbor_distances(const EmbeddingMatrix& m) {
  const std::size_t n = m.rows();
  if (n < 2) throw Error("nearest_neighbor_distances: need at least 2 rows");
  m.validate();
  NearestNeighborResult r;
  r.distances.resize(n);
  r.nn_index.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* a = m.row(i);
    double best_sq = std::numeric_limits<double>::infinity();
    std::size_t best_j = n;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double* b = m.row(j);
      double sq = 0.0;
      for (std::size_t k = 0; k < m.dim; ++k) {
        const double diff = a[k] - b[k];
        sq += diff * diff;
      }
      if (sq < best_sq) {
        best_sq = sq;
        best_j = j;
      }
    }
    r.distances[i] = std::sqrt(best_sq);
    r.nn_index[i] = best_j;
  }
  return r;
}

struct UniformityResult {
  double u = 0.0;
  double mu = 0.0;
  std::vector<double> distances;
  std::vector<std::size_t> nn_index;
  std::string provider_id;

  json to_json() const {
    return json{{"u", u}, {"mu", mu}, {"n", distances.size()}, {"provider_id", provider_id}};
  }
};

inline UniformityResult uniformity(const EmbeddingMatrix& m) {
  NearestNeighborResult nn = nearest_neighbor_distances(m);
  UniformityResult r;
  r.provider_id = m.provider_id;
  r.distances = std::move(nn.distances);
  r.nn_index = std::move(nn.nn_index);
  const double n = static_cast<double>(r.distances.size());
  double sum = 0.0;
  for (double d : r.distances) sum += d;
  r.mu = sum / n;
  double var = 0.0;
  for (double d : r.distances) var += (d - r.mu) * (d - r.mu);
  r.u = var / n;
  return r;
}

// ---------------------------------------------------------------------------
// Instruction perturbation for the ambiguity analysis.
// ---------------------------------------------------------------------------

class Perturber {
 public:
  virtual ~Perturber() = default;
  /// Produces the k-th deterministic variant of `instruction`.
  virtual std::string perturb(const std::string& instruction, std::size_t k) const = 0;
  virtual std::string id() const = 0;
};

/// Drops the (k mod n)-th word token and rejoins the rest with single spaces.
/// Fully reproducible; no randomness.
class TokenDropPerturber final : public Perturber {
 public:
  std::string perturb(const std::string& instruction, std::size_t k) const override {
    const auto tokens = BuiltinTokenizer::tokenize(instruction);
    std::vector<std::size_t> word_positions;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (BuiltinTokenizer::is_word_char(static_cast<unsigned char>(tokens[i][0]))) {
        word_positions.push_back(i);
      }
    }
    if (word_positions.empty()) return instruction;
    const std::size_t drop = word_positions[k % word_positions.size()];
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i == drop) continue;
      if (!out.empty()) out.push_back(' ');
      out += tokens[i];
    }
    return out;
  }

  std::string id() const override { return "token-drop"; }
};

/// Asks a completion backend for a paraphrase; variant index k is woven into
/// the prompt so distinct k give distinct (cacheable) requests.
class LlmParaphrasePerturber final : public Perturber {
 public:
  LlmParaphrasePerturber(CompletionBackend& backend, std::string model, Decoding decoding = {})
      : backend_(backend), model_(std::move(model)), decoding_(decoding) {}

  std::string perturb(const std::string& instruction, std::size_t k) const override {
    BackendRequest req = BackendRequest::complete_of(
        model_,
        "Rewrite the following instruction with small wording changes, keeping its meaning "
        "intact. Produce variant #" + std::to_string(k + 1) +
        ". Reply with the rewritten instruction only.\n\n" + instruction,
        decoding_);
    return trim(backend_.complete(req).text);
  }

  std::string id() const override { return "llm-paraphrase"; }

 private:
  CompletionBackend& backend_;
  std::string model_;
  Decoding decoding_;
};

// ---------------------------------------------------------------------------
// Ambiguity: instruction uncertainty vs. prediction probability.
// ---------------------------------------------------------------------------

struct AmbiguityScore {
  std::string sample_id;
  double base_loss = 0.0;               // mean response NLL per token
  double prediction_probability = 0.0;  // 1 / base_loss
  double instruction_uncertainty = 0.0; // mean |loss(perturbed) - base_loss|
  std::size_t k = 0;                    // number of perturbations

  json to_json() const {
    return json{{"sample_id", sample_id},
                {"base_loss", base_loss},
                {"prediction_probability", prediction_probability},
                {"instruction_uncertainty", instruction_uncertainty},
                {"k", k}};
  }
};

/// Scores one sample. Degenerate perturbations (variant equals the original)
/// are regenerated with later variant indices up to a small bound and then
/// accepted as a zero loss delta.
inline AmbiguityScore instruction_uncertainty(const Sample& s, ScoringBackend& scorer,
                                              const Perturber& perturber, std::size_t k) {
  if (k == 0) throw Error("instruction_uncertainty: K must be >= 1");
  if (s.response.empty()) throw Error("instruction_uncertainty: sample " + s.id + " has no response");
  AmbiguityScore out;
  out.sample_id = s.id;
  out.k = k;
  out.base_loss = scorer.score(s.instruction, s.response).mean_nll_per_token;
  if (!(out.base_loss > 0.0) || !std::isfinite(out.base_loss)) {
    throw BackendError("scorer returned non-positive loss for sample " + s.id);
  }
  out.prediction_probability = 1.0 / out.base_loss;
  constexpr std::size_t kRegenerateBound = 4;
  double delta_sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    std::string variant = perturber.perturb(s.instruction, i);
    for (std::size_t retry = 1; variant == s.instruction && retry <= kRegenerateBound; ++retry) {
      variant = perturber.perturb(s.instruction, i + retry * k);
    }
    if (variant == s.instruction) continue;  // counts as delta 0
    const double loss = scorer.score(variant, s.response).mean_nll_per_token;
    delta_sum += std::fabs(loss - out.base_loss);
  }
  out.instruction_uncertainty = delta_sum / static_cast<double>(k);
  return out;
}

struct AmbiguityReport {
  std::string corpus_name;
  std::string scorer_id;
  std::string perturber_id;
  std::size_t k = 0;
  std::vector<AmbiguityScore> scores;
  std::vector<std::pair<std::string, std::string>> failures;  // (sample id, error)

  double mean_uncertainty() const {
    if (scores.empty()) return 0.0;
    double s = 0.0;
    for (const auto& a : scores) s += a.instruction_uncertainty;
    return s / static_cast<double>(scores.size());
  }

  double mean_prediction_probability() const {
    if (scores.empty()) return 0.0;
    double s = 0.0;
    for (const auto& a : scores) s += a.prediction_probability;
    return s / static_cast<double>(scores.size());
  }

  double mean_base_loss() const {
    if (scores.empty()) return 0.0;
    double s = 0.0;
    for (const auto& a : scores) s += a.base_loss;
    return s / static_cast<double>(scores.size());
  }

  json to_json() const {
    json per_sample = json::array();
    for (const auto& a : scores) per_sample.push_back(a.to_json());
    json failed = json::array();
    for (const auto& [id, what] : failures) failed.push_back({{"sample_id", id}, {"error", what}});
    return json{{"schema_version", 1},
                {"corpus", corpus_name},
                {"scorer_id", scorer_id},
                {"perturber_id", perturber_id},
                {"k", k},
                {"scores", per_sample},
                {"failures", failed},
                {"mean_uncertainty", mean_uncertainty()},
                {"mean_prediction_probability", mean_prediction_probability()},
                {"mean_base_loss", mean_base_loss()}};
  }

  /// Two-column point set (uncertainty, prediction_probability) for plotting.
  void write_points(const std::filesystem::path& path) const {
    std::string out = "instruction_uncertainty\tprediction_probability\n";
    char buf[64];
    for (const auto& a : scores) {
      std::snprintf(buf, sizeof(buf), "%.17g\t%.17g\n", a.instruction_uncertainty,
                    a.prediction_probability);
      out += buf;
    }
    write_file_atomic(path, out);
  }
};

/// Scores a whole corpus; per-sample scorer failures are recorded and the
/// report is still produced.
inline AmbiguityReport ambiguity_report(const Corpus& c, ScoringBackend& scorer,
                                        const Perturber& perturber, std::size_t k) {
  AmbiguityReport r;
  r.corpus_name = c.name;
  r.scorer_id = scorer.id();
  r.perturber_id = perturber.id();
  r.k = k;
  for (const auto& s : c.samples) {
    try {
      r.scores.push_back(instruction_uncertainty(s, scorer, perturber, k));
    } catch (const Error& e) {
      r.failures.emplace_back(s.id, e.what());
    }
  }
  return r;
}

}  // namespace iftk
