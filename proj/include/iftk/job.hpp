#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include <json.hpp>

#include "iftk/backend.hpp"
#include "iftk/cache.hpp"
#include "iftk/config.hpp"
#include "iftk/corpus.hpp"
#include "iftk/embedding.hpp"
#include "iftk/errors.hpp"
#include "iftk/evolve.hpp"
#include "iftk/fusion.hpp"
#include "iftk/http_backend.hpp"
#include "iftk/metrics.hpp"
#include "iftk/mock_backend.hpp"
#include "iftk/report.hpp"
#include "iftk/tokenizer.hpp"

namespace iftk {

// ---------------------------------------------------------------------------
// Backend assembly from configuration.
// ---------------------------------------------------------------------------

/// Owns every live service object a run needs; hands out interface references.
struct Backends {
  std::shared_ptr<SpendLedger> ledger;
  std::shared_ptr<MockBackend> mock;
  std::shared_ptr<HttpBackend> http;
  std::shared_ptr<RequestCache> cache;
  std::shared_ptr<CachingBackend> cached;
  std::shared_ptr<MockScorer> mock_scorer;
  std::shared_ptr<HashingEmbedder> hash_embedder;
  std::string completion_model;
  Decoding fusion_decoding{1.0, 2048};
  Decoding response_decoding{0.0, 2048};

  CompletionBackend& completion() {
    if (cached) return *cached;
    if (mock) return *mock;
    if (http) return *http;
    throw ConfigError("no completion backend configured");
  }

  ScoringBackend& scorer() {
    if (mock_scorer) return *mock_scorer;
    if (http) return *http;
    throw ConfigError("no scoring backend configured");
  }

  EmbeddingBackend& embedder() {
    if (hash_embedder) return *hash_embedder;
    if (http) return *http;
    throw ConfigError("no embedding backend configured");
  }
};

inline Backends make_backends(const KeyValueConfig& cfg) {
  Backends b;
  const std::string kind = cfg.get("backend.kind", "mock");
  std::optional<double> cap;
  if (cfg.has("spend_cap_usd")) cap = cfg.get_double("spend_cap_usd", 0.0);
  if (kind != "mock" && (!cap || *cap <= 0.0)) {
    throw ConfigError("a positive spend_cap_usd is required with a live backend");
  }
  b.ledger = std::make_shared<SpendLedger>(cap);
  b.completion_model = cfg.get("backend.model", "gpt-4-1106-preview");
  b.fusion_decoding.temperature = cfg.get_double("backend.temperature_fusion", 1.0);
  b.response_decoding.temperature = cfg.get_double("backend.temperature_responses", 0.0);
  b.fusion_decoding.max_output_tokens = b.response_decoding.max_output_tokens =
      static_cast<std::size_t>(cfg.get_int("backend.max_output_tokens", 2048));

  if (kind == "mock") {
    MockBackend::Options m;
    m.seed = static_cast<std::uint64_t>(cfg.get_int("backend.mock_seed", 7));
    m.invalid_probability = cfg.get_double("backend.mock_invalid_p", 0.0);
    m.behavior = MockBackend::behavior_from_string(cfg.get("backend.mock_behavior", "fuse"));
    const std::string behavior = cfg.get("backend.mock_behavior", "fuse");
    if (behavior.rfind("append:", 0) == 0) m.suffix = behavior.substr(7);
    m.prices = cfg.price_table();
    b.mock = std::make_shared<MockBackend>(m, b.ledger.get());
  } else if (kind == "http") {
    HttpBackendConfig h;
    h.endpoint = cfg.get("backend.endpoint", "https://api.openai.com/v1");
    h.api_key_env = cfg.get("backend.api_key_env", "OPENAI_API_KEY");
    h.model = b.completion_model;
    h.retry.max_attempts = static_cast<std::size_t>(cfg.get_int("backend.max_attempts", 5));
    h.rate_limit_requests = static_cast<std::size_t>(cfg.get_int("backend.rate_limit_requests", 60));
    h.rate_limit_window_ms = cfg.get_int("backend.rate_limit_window_ms", 60000);
    h.max_in_flight = static_cast<std::size_t>(cfg.get_int("backend.max_in_flight", 4));
    h.prices = cfg.price_table();
    b.http = std::make_shared<HttpBackend>(h, b.ledger.get());
  } else {
    throw ConfigError("unknown backend.kind: " + kind);
  }

  const std::string cache_dir = cfg.get("cache_dir");
  if (!cache_dir.empty()) {
    b.cache = std::make_shared<RequestCache>(cache_dir);
    CompletionBackend& inner = b.mock ? static_cast<CompletionBackend&>(*b.mock)
                                      : static_cast<CompletionBackend&>(*b.http);
    const auto mode = cfg.get_bool("cache_replay_only", false) ? CachingBackend::Mode::replay
                                                               : CachingBackend::Mode::read_write;
    b.cached = std::make_shared<CachingBackend>(inner, *b.cache, mode);
  }

  const std::string scorer = cfg.get("scorer", kind == "http" ? "http" : "mock");
  if (scorer == "mock") {
    MockScorer::Options s;
    s.base = cfg.get_double("scorer.base", 1.0);
    s.per_response_token = cfg.get_double("scorer.per_response_token", 0.0);
    s.per_instruction_token = cfg.get_double("scorer.per_instruction_token", 0.0);
    // A content-keyed component by default so offline ambiguity runs produce
    // a spread instead of a single degenerate point.
    s.content_noise = cfg.get_double("scorer.content_noise", 0.25);
    s.seed = static_cast<std::uint64_t>(cfg.get_int("scorer.seed", 1));
    b.mock_scorer = std::make_shared<MockScorer>(s);
  } else if (scorer == "http") {
    if (!b.http) throw ConfigError("scorer=http requires backend.kind=http");
  } else {
    throw ConfigError("unknown scorer: " + scorer);
  }

  const std::string embedder = cfg.get("metrics.embedder", "hash");
  if (embedder == "hash") {
    b.hash_embedder = std::make_shared<HashingEmbedder>(
        static_cast<std::size_t>(cfg.get_int("metrics.embed_dim", 256)));
  } else if (embedder == "http") {
    if (!b.http) throw ConfigError("metrics.embedder=http requires backend.kind=http");
  } else {
    throw ConfigError("unknown embedder: " + embedder);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Durable job state.
// ---------------------------------------------------------------------------

/// Exclusive advisory lock on a state path; one job per state file.
class StateLock {
 public:
  explicit StateLock(const std::filesystem::path& state_path) {
    path_ = state_path.string() + ".lock";
    if (state_path.has_parent_path()) {
      std::error_code ec;
      std::filesystem::create_directories(state_path.parent_path(), ec);
    }
    fd_ = ::open(path_.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw Error("cannot open lock file " + path_);
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw ConfigError("another job already holds the lock on " + path_);
    }
  }

  ~StateLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }

  StateLock(const StateLock&) = delete;
  StateLock& operator=(const StateLock&) = delete;

 private:
  std::string path_;
  int fd_ = -1;
};

struct JobState {
  std::string job_id;
  std::string config_hash;
  nlohmann::json stages = nlohmann::json::object();  // stage name -> true when complete
  std::optional<FusionStats> fusion_stats;
  double spend_usd = 0.0;
  bool complete = false;

  bool stage_done(const std::string& name) const { return stages.value(name, false); }
  void mark_done(const std::string& name) { stages[name] = true; }

  nlohmann::json to_json() const {
    nlohmann::json j{{"schema_version", 1},
                     {"job_id", job_id},
                     {"config_hash", config_hash},
                     {"stages", stages},
                     {"spend_usd", spend_usd},
                     {"complete", complete}};
    if (fusion_stats) j["fusion_stats"] = fusion_stats->to_json();
    return j;
  }

  static JobState from_json(const nlohmann::json& j) {
    JobState s;
    s.job_id = j.value("job_id", std::string());
    s.config_hash = j.value("config_hash", std::string());
    s.stages = j.value("stages", nlohmann::json::object());
    s.spend_usd = j.value("spend_usd", 0.0);
    s.complete = j.value("complete", false);
    if (j.contains("fusion_stats")) s.fusion_stats = FusionStats::from_json(j["fusion_stats"]);
    return s;
  }

  void save(const std::filesystem::path& path) const {
    write_file_atomic(path, to_json().dump(2) + "\n");
  }

  static JobState load(const std::filesystem::path& path) {
    return from_json(nlohmann::json::parse(read_file(path)));
  }
};

// ---------------------------------------------------------------------------
// The fixed linear stage graph:
//   partition -> split -> fuse -> collect -> dedup -> metrics -> report
// Every stage writes its output file and flips its state flag; a resumed job
// skips completed stages and the generation stages resume mid-flight through
// their own checkpoints.
// ---------------------------------------------------------------------------

struct JobResult {
  RunReport report;
  JobState state;
  std::filesystem::path out_dir;
};

inline JobResult run_job(const KeyValueConfig& cfg) {
  namespace fs = std::filesystem;
  const std::string seeds_path = cfg.get("seeds");
  if (seeds_path.empty()) throw ConfigError("config: seeds path is required");
  if (!fs::exists(seeds_path)) throw ConfigError("config: seeds file not found: " + seeds_path);
  const fs::path out_dir = cfg.get("out_dir", "out");
  fs::create_directories(out_dir);
  const fs::path state_path = cfg.get("state", (out_dir / "job.state.json").string());
  const std::uint64_t rng_seed = static_cast<std::uint64_t>(cfg.get_int("rng_seed", 0));

  StateLock lock(state_path);
  // Guardrail keys never influence outputs, so changing them (raising a
  // spend cap after a halt) must not orphan the resumable state.
  static const std::set<std::string> kGuardrailKeys = {
      "spend_cap_usd", "estimate.avg_input_tokens", "estimate.avg_output_tokens"};
  const std::string config_hash = cfg.hash(kGuardrailKeys);
  JobState state;
  const bool fresh = !fs::exists(state_path);
  if (!fresh) {
    state = JobState::load(state_path);
    if (state.config_hash != config_hash) {
      throw ConfigError("state file " + state_path.string() +
                        " belongs to a different configuration (config changed since the last "
                        "run); use a fresh state path or restore the original config");
    }
  } else {
    state.job_id = content_hash_hex(config_hash + seeds_path).substr(0, 12);
    state.config_hash = config_hash;
  }

  // Pre-flight affordability gate for live backends: refuse before the first
  // request when the linear estimate already exceeds the cap.
  if (cfg.get("backend.kind", "mock") != "mock" && fresh) {
    const double cap = cfg.get_double("spend_cap_usd", 0.0);
    const auto price = cfg.price_table().find(cfg.get("backend.model", "gpt-4-1106-preview"));
    if (price) {
      const std::size_t m = static_cast<std::size_t>(cfg.get_int("fusion.count", 10));
      const double avg_in = cfg.get_double("estimate.avg_input_tokens", 600.0);
      const double avg_out = cfg.get_double("estimate.avg_output_tokens", 500.0);
      const double est = estimate_cost(2 * m, avg_in, avg_out, *price);
      if (est > cap) {
        throw SpendCapError("estimated cost " + std::to_string(est) +
                            " USD exceeds spend cap " + std::to_string(cap) +
                            " USD; refusing to start");
      }
    }
  }

  Backends b = make_backends(cfg);
  // A resumed job keeps accumulating spend against the same cap.
  if (!fresh && state.spend_usd > 0.0) b.ledger->seed_total(state.spend_usd);
  auto tokenizer = make_tokenizer(cfg.get("tokenizer", "builtin"));

  const fs::path python_path = out_dir / "python.jsonl";
  const fs::path non_python_path = out_dir / "non_python.jsonl";
  const fs::path selected_path = out_dir / "selected.jsonl";
  const fs::path rest_path = out_dir / "rest.jsonl";
  const fs::path fused_path = out_dir / "fused.jsonl";
  const fs::path collected_path = out_dir / "responses.jsonl";
  const fs::path final_path = out_dir / "final.jsonl";
  const fs::path report_json_path = out_dir / "report.json";
  const fs::path report_txt_path = out_dir / "report.txt";

  auto checkpoint = [&] { state.save(state_path); };

  // partition
  if (!state.stage_done("partition")) {
    Corpus seeds = load_corpus(seeds_path);
    PartitionResult part = partition_by_language(seeds);
    save_corpus(part.python, python_path);
    save_corpus(part.non_python, non_python_path);
    std::string decisions;
    for (const auto& [id, rule] : part.decisions) decisions += id + "\t" + rule + "\n";
    write_file_atomic(out_dir / "partition.decisions.tsv", decisions);
    state.mark_done("partition");
    checkpoint();
  }

  // split
  if (!state.stage_done("split")) {
    Corpus python = load_corpus(python_path);
    if (cfg.has("split.k")) {
      const std::size_t k = static_cast<std::size_t>(cfg.get_int("split.k", 0));
      if (k > python.size()) {
        throw ConfigError("split.k = " + std::to_string(k) + " exceeds the python partition (" +
                          std::to_string(python.size()) + " samples)");
      }
      auto [sel, rest] = split_random(python, k, rng_seed);
      save_corpus(sel, selected_path);
      save_corpus(rest, rest_path);
    } else {
      save_corpus(python, selected_path);
    }
    state.mark_done("split");
    checkpoint();
  }

  // fuse
  Corpus selected = load_corpus(selected_path);
  if (!state.stage_done("fuse")) {
    FusionPolicy policy;
    policy.target_count = static_cast<std::size_t>(cfg.get_int("fusion.count", 10));
    policy.rng_seed = rng_seed;
    policy.max_attempts_per_slot =
        static_cast<std::size_t>(cfg.get_int("fusion.max_attempts_per_slot", 20));
    policy.max_total_attempts =
        static_cast<std::size_t>(cfg.get_int("fusion.max_total_attempts", 0));
    policy.allow_same_parent_twice = cfg.get_bool("fusion.allow_repeat_parents", false);
    policy.dedup_children = cfg.get_bool("fusion.dedup_children", true);
    policy.concurrency = static_cast<std::size_t>(cfg.get_int("backend.max_in_flight", 1));
    policy.model_id = b.completion_model;
    policy.decoding = b.fusion_decoding;
    FuseOptions fopts;
    fopts.state_path = out_dir / "fuse.state.json";
    FusionOutcome fused = [&] {
      try {
        return fuse_until(selected, policy, b.completion(), fopts);
      } catch (const SpendCapError&) {
        // Halt cleanly: persist the cumulative ledger so a resume keeps
        // counting against the cap.
        state.spend_usd = b.ledger->total();
        state.save(state_path);
        throw;
      }
    }();
    save_corpus(fused.fused, fused_path);
    write_file_atomic(out_dir / "fused.stats.json", fused.stats.to_json().dump(2) + "\n");
    state.fusion_stats = fused.stats;
    state.spend_usd = b.ledger->total();
    state.mark_done("fuse");
    checkpoint();
  }

  // collect
  if (!state.stage_done("collect")) {
    const auto ancestor_ids = selected.id_set();
    Corpus fused = load_corpus(fused_path, &ancestor_ids);
    CollectOptions copts;
    copts.model_id = b.completion_model;
    copts.decoding = b.response_decoding;
    copts.state_path = out_dir / "collect.state.json";
    CollectOutcome collected = [&] {
      try {
        return collect_responses(fused, b.completion(), copts);
      } catch (const SpendCapError&) {
        state.spend_usd = b.ledger->total();
        state.save(state_path);
        throw;
      }
    }();
    save_corpus(collected.corpus, collected_path);
    state.spend_usd = b.ledger->total();
    state.mark_done("collect");
    checkpoint();
  }

  // dedup
  if (!state.stage_done("dedup")) {
    const auto ancestor_ids = selected.id_set();
    Corpus collected = load_corpus(collected_path, &ancestor_ids);
    Corpus final_corpus = dedup(collected);
    check_integrity(final_corpus, &ancestor_ids);
    save_corpus(final_corpus, final_path);
    state.mark_done("dedup");
    checkpoint();
  }

  // metrics
  if (!state.stage_done("metrics")) {
    const auto ancestor_ids = selected.id_set();
    Corpus final_corpus = load_corpus(final_path, &ancestor_ids);
    nlohmann::json u_json = nlohmann::json::array();
    if (selected.size() >= 2) {
      UniformityResult u_sel = uniformity(embed_corpus(selected, b.embedder()));
      u_json.push_back({{"corpus", selected.name}, {"result", u_sel.to_json()}});
      Corpus merged;
      merged.name = selected.name + "+fused";
      merged.samples = selected.samples;
      merged.samples.insert(merged.samples.end(), final_corpus.samples.begin(),
                            final_corpus.samples.end());
      UniformityResult u_all = uniformity(embed_corpus(merged, b.embedder()));
      u_json.push_back({{"corpus", merged.name}, {"result", u_all.to_json()}});
    }
    write_file_atomic(out_dir / "uniformity.json", u_json.dump(2) + "\n");
    state.mark_done("metrics");
    checkpoint();
  }

  // report
  RunReport report;
  {
    Corpus seeds = load_corpus(seeds_path);
    report.add(token_stats(seeds, *tokenizer));
    report.add(token_stats(selected, *tokenizer));
    const auto ancestor_ids = selected.id_set();
    if (fs::exists(final_path)) {
      Corpus final_corpus = load_corpus(final_path, &ancestor_ids);
      report.add(token_stats(final_corpus, *tokenizer));
    } else {
      report.add_absent("final");
    }
    report.fusion = state.fusion_stats;
    if (fs::exists(out_dir / "uniformity.json")) {
      const nlohmann::json u = nlohmann::json::parse(read_file(out_dir / "uniformity.json"));
      for (const auto& row : u) {
        UniformityResult ur;
        ur.provider_id = row["result"].value("provider_id", std::string());
        ur.mu = row["result"].value("mu", 0.0);
        ur.u = row["result"].value("u", 0.0);
        ur.distances.resize(row["result"].value("n", std::size_t{0}));
        report.add(row.value("corpus", std::string()), ur);
      }
    }
    write_file_atomic(report_json_path, report.to_json().dump(2) + "\n");
    write_file_atomic(report_txt_path, report.render_text());
    state.mark_done("report");
  }

  state.spend_usd = b.ledger->total();
  state.complete = true;
  checkpoint();

  JobResult result;
  result.report = std::move(report);
  result.state = std::move(state);
  result.out_dir = out_dir;
  return result;
}

}  // namespace iftk
