#pragma once

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "iftk/corpus.hpp"
#include "iftk/fusion.hpp"
#include "iftk/metrics.hpp"

namespace iftk {

/// Consolidated run report: per-corpus token statistics, fusion tallies, and
/// uniformity results. Dual-emitted as versioned JSON and a human table.
struct RunReport {
  struct CorpusRow {
    std::string name;
    bool absent = false;
    std::size_t n_samples = 0;
    double instruction_mean_tokens = 0.0;
    double response_mean_tokens = 0.0;
    std::string tokenizer_id;
  };

  struct UniformityRow {
    std::string corpus;
    std::string provider_id;
    std::size_t n = 0;
    double mu = 0.0;
    double u = 0.0;
  };

  std::vector<CorpusRow> corpora;
  std::optional<FusionStats> fusion;
  std::vector<UniformityRow> uniformity_rows;

  void add(const TokenStatsReport& r) {
    corpora.push_back({r.corpus_name, false, r.n_samples, r.instruction_mean_tokens,
                       r.response_mean_tokens, r.tokenizer_id});
  }

  void add_absent(const std::string& name) { corpora.push_back({name, true, 0, 0.0, 0.0, ""}); }

  void add(const std::string& corpus, const UniformityResult& u) {
    uniformity_rows.push_back({corpus, u.provider_id, u.distances.size(), u.mu, u.u});
  }

  json to_json() const {
    json rows = json::array();
    for (const auto& c : corpora) {
      if (c.absent) {
        rows.push_back({{"corpus", c.name}, {"absent", true}});
      } else {
        rows.push_back({{"corpus", c.name},
                        {"n_samples", c.n_samples},
                        {"instruction_mean_tokens", c.instruction_mean_tokens},
                        {"response_mean_tokens", c.response_mean_tokens},
                        {"tokenizer_id", c.tokenizer_id}});
      }
    }
    json u_rows = json::array();
    for (const auto& u : uniformity_rows) {
      u_rows.push_back({{"corpus", u.corpus},
                        {"provider_id", u.provider_id},
                        {"n", u.n},
                        {"mu", u.mu},
                        {"u", u.u}});
    }
    json j{{"schema_version", 1}, {"corpora", rows}, {"uniformity", u_rows}};
    if (fusion) j["fusion"] = fusion->to_json();
    return j;
  }

  static RunReport from_json(const json& j) {
    RunReport r;
    for (const auto& row : j.value("corpora", json::array())) {
      CorpusRow c;
      c.name = row.value("corpus", std::string());
      c.absent = row.value("absent", false);
      c.n_samples = row.value("n_samples", std::size_t{0});
      c.instruction_mean_tokens = row.value("instruction_mean_tokens", 0.0);
      c.response_mean_tokens = row.value("response_mean_tokens", 0.0);
      c.tokenizer_id = row.value("tokenizer_id", std::string());
      r.corpora.push_back(std::move(c));
    }
    for (const auto& row : j.value("uniformity", json::array())) {
      UniformityRow u;
      u.corpus = row.value("corpus", std::string());
      u.provider_id = row.value("provider_id", std::string());
      u.n = row.value("n", std::size_t{0});
      u.mu = row.value("mu", 0.0);
      u.u = row.value("u", 0.0);
      r.uniformity_rows.push_back(std::move(u));
    }
    if (j.contains("fusion")) r.fusion = FusionStats::from_json(j["fusion"]);
    return r;
  }

  std::string render_text() const {
    char buf[256];
    std::string out;
    std::snprintf(buf, sizeof(buf), "%-24s %14s %19s %19s\n", "Dataset", "#Instructions",
                  "Inst. Avg. Tokens", "Resp. Avg. Tokens");
    out += buf;
    for (const auto& c : corpora) {
      if (c.absent) {
        std::snprintf(buf, sizeof(buf), "%-24s %14s %19s %19s\n", c.name.c_str(), "(absent)",
                      "-", "-");
      } else {
        std::snprintf(buf, sizeof(buf), "%-24s %14zu %19.1f %19.1f\n", c.name.c_str(),
                      c.n_samples, c.instruction_mean_tokens, c.response_mean_tokens);
      }
      out += buf;
    }
    if (fusion) {
      std::snprintf(buf, sizeof(buf),
                    "\nFusion: attempts=%zu valid=%zu invalid=%zu duplicates=%zu "
                    "pass_rate=%.4f spend_usd=%.6f\n",
                    fusion->attempts, fusion->valid_count, fusion->invalid_count,
                    fusion->duplicate_count, fusion->pass_rate(), fusion->spend);
      out += buf;
    }
    if (!uniformity_rows.empty()) out += "\n";
    for (const auto& u : uniformity_rows) {
      std::snprintf(buf, sizeof(buf), "Uniformity: corpus=%s n=%zu mu=%.9g U=%.9g provider=%s\n",
                    u.corpus.c_str(), u.n, u.mu, u.u, u.provider_id.c_str());
      out += buf;
    }
    return out;
  }
};

}  // namespace iftk
