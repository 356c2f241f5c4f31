#pragma once

#include <deque>
#include <fstream>
#include <functional>
#include <future>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "iftk/backend.hpp"
#include "iftk/corpus.hpp"
#include "iftk/errors.hpp"
#include "iftk/util.hpp"

namespace iftk {

// ---------------------------------------------------------------------------
// Prompt construction and output validation.
// ---------------------------------------------------------------------------

/// The fusion prompt template. The two placeholders are replaced verbatim;
/// every other byte is fixed and covered by a golden-file test.
inline const std::string& fusion_prompt_template() {
  static const std::string tmpl =
      "Your task is to act as a Prompt Fusion Specialist. Your objective is to merge "
      "#Given Prompt 1# and #Given Prompt 2# into a single, cohesive #Fused Prompt#. "
      "This new prompt should:\n"
      "1. Integrate the content from both #Given Prompt 1# and #Given Prompt 2#.\n"
      "2. Maintain a similar length and complexity level as the original prompts.\n"
      "3. Be coherent and solvable, incorporating elements from both prompts in a balanced "
      "way.\n"
      "4. In cases where the original prompts specify different programming languages, choose "
      "only one for the #Fused Prompt#.\n"
      "If the resulting #Fused Prompt# is not logically coherent or solvable, simply respond "
      "with 'INVALID PROMPT'.\n"
      "#Given Prompt 1#:\n"
      "<Here is Instruction 1>\n"
      "#Given Prompt 2#:\n"
      "<Here is Instruction 2>\n"
      "#Fused Prompt#:";
  return tmpl;
}

inline std::string build_fusion_prompt(const std::string& instruction1,
                                       const std::string& instruction2) {
  if (instruction1.empty() || instruction2.empty()) {
    throw Error("build_fusion_prompt: instructions must be non-empty");
  }
  std::string prompt = fusion_prompt_template();
  prompt = replace_all(std::move(prompt), "<Here is Instruction 1>", instruction1);
  prompt = replace_all(std::move(prompt), "<Here is Instruction 2>", instruction2);
  return prompt;
}

/// True iff the model rejected the fusion: after trimming whitespace and
/// surrounding quote characters, the output equals or begins with the
/// sentinel, case-insensitively.
inline bool detect_invalid(const std::string& model_output) {
  std::string t = trim(model_output);
  auto is_quote = [](char c) { return c == '"' || c == '\'' || c == '`'; };
  while (!t.empty() && is_quote(t.front())) t.erase(t.begin());
  while (!t.empty() && is_quote(t.back())) t.pop_back();
  t = trim(t);
  return starts_with_icase(t, "INVALID PROMPT");
}

// ---------------------------------------------------------------------------
// Pair sampling.
// ---------------------------------------------------------------------------

/// Uniform draw over ordered index pairs; j != k unless `allow_same`.
inline std::pair<std::size_t, std::size_t> sample_pair_indices(std::size_t n, Rng& rng,
                                                               bool allow_same = false) {
  if (n == 0 || (n < 2 && !allow_same)) {
    throw CorpusError("sample_pair: corpus too small (" + std::to_string(n) + " samples)");
  }
  const std::size_t j = static_cast<std::size_t>(rng.below(n));
  std::size_t k;
  if (allow_same) {
    k = static_cast<std::size_t>(rng.below(n));
  } else {
    k = static_cast<std::size_t>(rng.below(n - 1));
    if (k >= j) ++k;
  }
  return {j, k};
}

inline std::pair<const Sample*, const Sample*> sample_pair(const Corpus& c, Rng& rng,
                                                           bool allow_same = false) {
  auto [j, k] = sample_pair_indices(c.size(), rng, allow_same);
  return {&c.samples[j], &c.samples[k]};
}

// ---------------------------------------------------------------------------
// The repeat-until-M engine.
// ---------------------------------------------------------------------------

struct FusionPolicy {
  std::size_t target_count = 1;  // M
  std::uint64_t rng_seed = 0;
  std::size_t max_attempts_per_slot = 20;
  std::size_t max_total_attempts = 0;  // 0 -> target_count * max_attempts_per_slot
  bool allow_same_parent_twice = false;
  bool dedup_children = true;
  std::size_t concurrency = 1;
  std::string model_id;
  Decoding decoding{1.0, 2048};  // diversity-oriented default for fusion

  void check() const {
    if (target_count < 1) throw ConfigError("fusion: target count M must be >= 1");
    if (max_attempts_per_slot < 1) throw ConfigError("fusion: max_attempts_per_slot must be >= 1");
    if (concurrency < 1) throw ConfigError("fusion: concurrency must be >= 1");
  }

  std::size_t total_attempt_budget() const {
    return max_total_attempts > 0 ? max_total_attempts : target_count * max_attempts_per_slot;
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"target_count", target_count},
                          {"rng_seed", rng_seed},
                          {"max_attempts_per_slot", max_attempts_per_slot},
                          {"max_total_attempts", max_total_attempts},
                          {"allow_same_parent_twice", allow_same_parent_twice},
                          {"dedup_children", dedup_children},
                          {"model_id", model_id},
                          {"temperature", decoding.temperature},
                          {"max_output_tokens", decoding.max_output_tokens}};
  }
};

struct FusionStats {
  std::size_t attempts = 0;
  std::size_t valid_count = 0;
  std::size_t invalid_count = 0;
  std::size_t duplicate_count = 0;
  double spend = 0.0;

  double pass_rate() const {
    return attempts == 0 ? 0.0
                         : static_cast<double>(valid_count) / static_cast<double>(attempts);
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"attempts", attempts},
                          {"valid", valid_count},
                          {"invalid", invalid_count},
                          {"duplicates", duplicate_count},
                          {"pass_rate", pass_rate()},
                          {"spend_usd", spend}};
  }

  static FusionStats from_json(const nlohmann::json& j) {
    FusionStats s;
    s.attempts = j.value("attempts", std::size_t{0});
    s.valid_count = j.value("valid", std::size_t{0});
    s.invalid_count = j.value("invalid", std::size_t{0});
    s.duplicate_count = j.value("duplicates", std::size_t{0});
    s.spend = j.value("spend_usd", 0.0);
    return s;
  }
};

struct FuseOptions {
  std::filesystem::path state_path;  // empty -> no checkpointing
  std::size_t stop_after = 0;        // accept at most this many children this run (0 = no limit)
  std::function<void(std::size_t accepted, const FusionStats&)> on_accept;
};

struct FusionOutcome {
  Corpus fused;
  FusionStats stats;
  bool complete = false;  // reached M
};

/// Attempt budget exhausted before reaching M; carries the partial result.
class FusionExhausted : public Error {
 public:
  FusionExhausted(std::string what, Corpus partial_corpus, FusionStats partial_stats)
      : Error(std::move(what)), partial(std::move(partial_corpus)), stats(partial_stats) {}
  Corpus partial;
  FusionStats stats;
};

namespace detail {

/// Identity of a fusion run; a resume with a different seed corpus, policy,
/// or backend is refused.
inline std::string fusion_config_hash(const Corpus& seeds, const nlohmann::json& policy_json,
                                      const std::string& backend_id, const char* kind) {
  std::string blob = kind;
  blob += "\x1f" + policy_json.dump() + "\x1f" + backend_id;
  for (const auto& s : seeds.samples) blob += "\x1f" + s.id + "\x1e" + s.instruction;
  return content_hash_hex(blob);
}

struct CheckpointedLines {
  std::vector<std::string> lines;
};

/// Reads up to `max_lines` well-formed lines, then rewrites the file to
/// exactly those lines so a torn trailing append (crash window) cannot
/// corrupt later appends.
inline std::vector<std::string> read_checkpoint_lines(const std::filesystem::path& path,
                                                      std::size_t max_lines) {
  std::vector<std::string> lines;
  {
    std::ifstream in(path);
    if (!in) return lines;
    std::string line;
    while (lines.size() < max_lines && std::getline(in, line)) {
      if (trim(line).empty()) continue;
      if (nlohmann::json::parse(line, nullptr, false).is_discarded()) break;
      lines.push_back(line);
    }
  }
  std::string clean;
  for (const auto& l : lines) {
    clean += l;
    clean.push_back('\n');
  }
  write_file_atomic(path, clean);
  return lines;
}

inline void append_line(const std::filesystem::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error("cannot append to " + path.string());
  out << line << '\n';
  out.flush();
  if (!out) throw Error("append failed: " + path.string());
}

/// Issues backend calls a fixed window ahead of consumption. Requests are a
/// pure function of the attempt index, so prefetching never perturbs the
/// deterministic attempt stream.
class AttemptPipeline {
 public:
  AttemptPipeline(std::function<BackendRequest(std::size_t)> request_for,
                  CompletionBackend& backend, std::size_t window)
      : request_for_(std::move(request_for)), backend_(&backend), window_(window) {}

  ~AttemptPipeline() { drain(); }

  BackendResult next(std::size_t attempt_index) {
    fill(attempt_index);
    auto fut = std::move(pending_.front());
    pending_.pop_front();
    return fut.get();
  }

  /// Completes already-issued speculative calls so a cache-backed run can
  /// replay them for free on resume. Results are discarded.
  void drain() {
    while (!pending_.empty()) {
      try {
        pending_.front().get();
      } catch (...) {
        // Speculative call; its attempt index will re-raise on consumption.
      }
      pending_.pop_front();
    }
  }

 private:
  void fill(std::size_t base_index) {
    while (pending_.size() < window_) {
      const std::size_t idx = base_index + pending_.size();
      BackendRequest req = request_for_(idx);
      if (window_ == 1) {
        std::promise<BackendResult> p;
        try {
          p.set_value(backend_->complete(req));
        } catch (...) {
          p.set_exception(std::current_exception());
        }
        pending_.push_back(p.get_future());
      } else {
        pending_.push_back(std::async(std::launch::async,
                                      [this, req]() { return backend_->complete(req); }));
      }
    }
  }

  std::function<BackendRequest(std::size_t)> request_for_;
  CompletionBackend* backend_;
  std::size_t window_;
  std::deque<std::future<BackendResult>> pending_;
};

}  // namespace detail

/// Runs the fusion loop until exactly M children are accepted. Invalid
/// outputs and (optionally) duplicate children are discarded and the slot is
/// resampled with a fresh pair. Progress is checkpointed after every accepted
/// child; restarting with the same seeds, policy, and backend (or its cache)
/// continues to an identical final corpus.
inline FusionOutcome fuse_until(const Corpus& seeds, const FusionPolicy& policy,
                                CompletionBackend& backend, const FuseOptions& opts = {}) {
  policy.check();
  if (seeds.size() < (policy.allow_same_parent_twice ? 1u : 2u)) {
    throw CorpusError("fuse_until: seed corpus too small");
  }
  const std::string config_hash =
      detail::fusion_config_hash(seeds, policy.to_json(), backend.id(), "fuse");

  FusionStats stats;
  std::vector<Sample> accepted;
  const std::filesystem::path children_path =
      opts.state_path.empty() ? std::filesystem::path()
                              : std::filesystem::path(opts.state_path.string() + ".children.jsonl");

  // Resume from a checkpoint when one exists and matches this configuration.
  if (!opts.state_path.empty() && std::filesystem::exists(opts.state_path)) {
    nlohmann::json st = nlohmann::json::parse(read_file(opts.state_path));
    const std::string prior = st.value("config_hash", std::string());
    if (prior != config_hash) {
      throw ConfigError(
          "fusion state at " + opts.state_path.string() +
          " was produced by a different configuration (seeds, policy, or backend changed); "
          "refusing to resume");
    }
    stats = FusionStats::from_json(st.value("stats", nlohmann::json::object()));
    for (const auto& line : detail::read_checkpoint_lines(children_path, stats.valid_count)) {
      accepted.push_back(sample_from_json(nlohmann::json::parse(line), accepted.size() + 1));
    }
    if (accepted.size() != stats.valid_count) {
      throw Error("fusion checkpoint corrupt: children file disagrees with state");
    }
  }

  std::unordered_set<std::string> seen_norm;
  for (const auto& s : accepted) seen_norm.insert(normalize_text(s.instruction));

  auto write_state = [&](bool complete) {
    if (opts.state_path.empty()) return;
    nlohmann::json st{{"schema_version", 1},
                      {"kind", "fuse"},
                      {"config_hash", config_hash},
                      {"stats", stats.to_json()},
                      {"complete", complete}};
    write_file_atomic(opts.state_path, st.dump(2) + "\n");
  };

  auto request_for = [&](std::size_t attempt_index) {
    Rng attempt_rng(mix64(policy.rng_seed, attempt_index));
    auto [j, k] = sample_pair_indices(seeds.size(), attempt_rng, policy.allow_same_parent_twice);
    BackendRequest req = BackendRequest::complete_of(
        policy.model_id,
        build_fusion_prompt(seeds.samples[j].instruction, seeds.samples[k].instruction),
        policy.decoding);
    return req;
  };

  auto parents_for = [&](std::size_t attempt_index) {
    Rng attempt_rng(mix64(policy.rng_seed, attempt_index));
    return sample_pair_indices(seeds.size(), attempt_rng, policy.allow_same_parent_twice);
  };

  detail::AttemptPipeline pipeline(request_for, backend, policy.concurrency);

  const std::size_t budget = policy.total_attempt_budget();
  std::size_t slot_attempts = 0;
  std::size_t accepted_this_run = 0;

  auto make_partial = [&](bool complete) {
    FusionOutcome out;
    out.fused.name = seeds.name + "-fused";
    out.fused.samples = accepted;
    out.fused.provenance["parent_corpus"] = seeds.name;
    out.fused.provenance["rng_seed"] = policy.rng_seed;
    out.fused.provenance["policy"] = policy.to_json();
    out.fused.provenance["backend_id"] = backend.id();
    out.stats = stats;
    out.complete = complete;
    return out;
  };

  while (accepted.size() < policy.target_count) {
    if (opts.stop_after > 0 && accepted_this_run >= opts.stop_after) {
      pipeline.drain();
      write_state(false);
      return make_partial(false);
    }
    if (stats.attempts >= budget || slot_attempts >= policy.max_attempts_per_slot) {
      pipeline.drain();
      write_state(false);
      FusionOutcome partial = make_partial(false);
      throw FusionExhausted(
          "fusion attempt budget exhausted after " + std::to_string(stats.attempts) +
              " attempts with " + std::to_string(accepted.size()) + "/" +
              std::to_string(policy.target_count) + " children accepted",
          std::move(partial.fused), partial.stats);
    }

    const std::size_t attempt_index = stats.attempts;
    BackendResult res = pipeline.next(attempt_index);
    ++stats.attempts;
    ++slot_attempts;
    stats.spend += res.cost_estimate;

    const std::string text = trim(res.text);
    if (text.empty() || detect_invalid(text)) {
      ++stats.invalid_count;
      continue;
    }
    const std::string norm = normalize_text(text);
    if (policy.dedup_children && seen_norm.count(norm)) {
      ++stats.duplicate_count;
      continue;
    }

    auto [j, k] = parents_for(attempt_index);
    Sample child;
    child.instruction = text;
    child.origin = Origin::fused;
    child.parents = {seeds.samples[j].id, seeds.samples[k].id};
    child.round = 0;
    child.id = "fused-" + content_hash_hex(child.parents[0] + "\x1f" + child.parents[1] + "\x1f" +
                                           text + "\x1f" + std::to_string(attempt_index));
    ++stats.valid_count;
    seen_norm.insert(norm);
    accepted.push_back(child);
    slot_attempts = 0;
    ++accepted_this_run;

    if (!opts.state_path.empty()) {
      detail::append_line(children_path, sample_to_json(child).dump());
      write_state(false);
    }
    if (opts.on_accept) opts.on_accept(accepted.size(), stats);
  }

  pipeline.drain();
  write_state(true);
  return make_partial(true);
}

// ---------------------------------------------------------------------------
// Response collection (separate pass so fusion pass-rate stays clean and the
// two stages can use different decoding settings).
// ---------------------------------------------------------------------------

struct CollectOptions {
  std::string model_id;
  Decoding decoding{0.0, 2048};  // reproducibility-oriented default for responses
  std::filesystem::path state_path;  // empty -> no checkpointing
};

struct CollectStats {
  std::size_t filled = 0;
  std::size_t failed = 0;
  std::size_t skipped = 0;  // already had a response (resume)
  double spend = 0.0;

  nlohmann::json to_json() const {
    return nlohmann::json{
        {"filled", filled}, {"failed", failed}, {"skipped", skipped}, {"spend_usd", spend}};
  }
};

struct CollectOutcome {
  Corpus corpus;
  CollectStats stats;
};

/// Fills every empty response with a completion of the bare instruction.
/// Order and ids are preserved. A per-sample backend failure (after retries)
/// flags that sample and the batch continues. Checkpointed per sample.
inline CollectOutcome collect_responses(const Corpus& input, CompletionBackend& backend,
                                        const CollectOptions& opts = {}) {
  nlohmann::json opt_json{{"model_id", opts.model_id},
                          {"temperature", opts.decoding.temperature},
                          {"max_output_tokens", opts.decoding.max_output_tokens}};
  const std::string config_hash =
      detail::fusion_config_hash(input, opt_json, backend.id(), "collect");

  CollectOutcome out;
  out.corpus = input;
  out.corpus.provenance["responses_backend"] = backend.id();

  // The response log holds one line per corpus position, in order, so line i
  // always describes sample i regardless of how skips and failures interleave.
  std::size_t resume_done = 0;
  const std::filesystem::path responses_path =
      opts.state_path.empty()
          ? std::filesystem::path()
          : std::filesystem::path(opts.state_path.string() + ".responses.jsonl");

  if (!opts.state_path.empty() && std::filesystem::exists(opts.state_path)) {
    nlohmann::json st = nlohmann::json::parse(read_file(opts.state_path));
    if (st.value("config_hash", std::string()) != config_hash) {
      throw ConfigError("collect state at " + opts.state_path.string() +
                        " was produced by a different configuration; refusing to resume");
    }
    out.stats.spend = st.value("spend_usd", 0.0);
    const std::size_t done = st.value("done", std::size_t{0});
    for (const auto& line : detail::read_checkpoint_lines(responses_path, done)) {
      const nlohmann::json rec = nlohmann::json::parse(line);
      const std::size_t i = resume_done;
      if (i >= out.corpus.samples.size() ||
          out.corpus.samples[i].id != rec.value("id", std::string())) {
        throw Error("collect checkpoint corrupt: response log disagrees with corpus order");
      }
      if (rec.value("skipped", false)) {
        ++out.stats.skipped;
      } else if (rec.value("failed", false)) {
        out.corpus.samples[i].extra["collect_failed"] = true;
        ++out.stats.failed;
      } else {
        out.corpus.samples[i].response = rec.value("response", std::string());
        ++out.stats.filled;
      }
      ++resume_done;
    }
    if (resume_done != done) throw Error("collect checkpoint corrupt: missing response lines");
  }

  auto write_state = [&](bool complete) {
    if (opts.state_path.empty()) return;
    nlohmann::json st{{"schema_version", 1},
                      {"kind", "collect"},
                      {"config_hash", config_hash},
                      {"done", out.stats.filled + out.stats.failed + out.stats.skipped},
                      {"spend_usd", out.stats.spend},
                      {"complete", complete}};
    write_file_atomic(opts.state_path, st.dump(2) + "\n");
  };

  for (std::size_t i = resume_done; i < out.corpus.samples.size(); ++i) {
    Sample& s = out.corpus.samples[i];
    nlohmann::json log{{"id", s.id}};
    if (!s.response.empty()) {
      ++out.stats.skipped;
      log["skipped"] = true;
    } else {
      try {
        BackendRequest req =
            BackendRequest::complete_of(opts.model_id, s.instruction, opts.decoding);
        BackendResult res = backend.complete(req);
        s.response = res.text;
        out.stats.spend += res.cost_estimate;
        ++out.stats.filled;
        log["response"] = s.response;
      } catch (const SpendCapError&) {
        write_state(false);
        throw;
      } catch (const BackendError& e) {
        s.extra["collect_failed"] = true;
        ++out.stats.failed;
        log["response"] = "";
        log["failed"] = true;
        log["error"] = e.what();
      }
    }
    if (!opts.state_path.empty()) {
      detail::append_line(responses_path, log.dump());
      write_state(false);
    }
  }
  write_state(true);
  return out;
}

}  // namespace iftk
