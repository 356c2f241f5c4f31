#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "iftk/backend.hpp"
#include "iftk/corpus.hpp"
#include "iftk/errors.hpp"
#include "iftk/fusion.hpp"
#include "iftk/util.hpp"

namespace iftk {

/// One rewrite heuristic: a prompt template with a single <SEED> placeholder.
struct EvolHeuristic {
  std::string name;
  std::string prompt_template;

  void check() const {
    std::size_t count = 0;
    std::size_t pos = 0;
    while ((pos = prompt_template.find("<SEED>", pos)) != std::string::npos) {
      ++count;
      pos += 6;
    }
    if (count != 1) {
      throw ConfigError("heuristic '" + name + "': template must contain <SEED> exactly once (found " +
                        std::to_string(count) + ")");
    }
  }
};

inline std::string build_evolve_prompt(const std::string& seed_instruction,
                                       const EvolHeuristic& h) {
  h.check();
  return replace_all(h.prompt_template, "<SEED>", seed_instruction);
}

/// A generic constraint/complexity-oriented default set. These are editable
/// stand-ins, not canonical prompts; supply your own via --heuristics.
inline std::vector<EvolHeuristic> default_heuristics() {
  return {
      {"add-constraint",
       "Rewrite the following programming task so it keeps its goal but adds one new "
       "requirement or constraint. Reply with the rewritten task only.\n<SEED>"},
      {"deepen",
       "Rewrite the following programming task so that it asks deeper questions about the "
       "same topic, increasing its difficulty slightly. Reply with the rewritten task "
       "only.\n<SEED>"},
      {"concretize",
       "Rewrite the following programming task, replacing any vague or general wording with "
       "concrete, specific requirements. Reply with the rewritten task only.\n<SEED>"},
      {"increase-reasoning",
       "Rewrite the following programming task so that solving it requires one more step of "
       "reasoning than before. Reply with the rewritten task only.\n<SEED>"},
      {"raise-complexity",
       "Rewrite the following programming task using a rarer data structure or a less common "
       "technique, keeping it solvable. Reply with the rewritten task only.\n<SEED>"},
  };
}

/// Loads heuristics from a JSON array of {"name", "template"} objects.
inline std::vector<EvolHeuristic> load_heuristics(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("heuristics file " + path.string() + ": " + e.what());
  }
  if (!j.is_array() || j.empty()) {
    throw ConfigError("heuristics file " + path.string() + ": expected a non-empty JSON array");
  }
  std::vector<EvolHeuristic> out;
  for (const auto& item : j) {
    EvolHeuristic h;
    h.name = item.value("name", std::string());
    h.prompt_template = item.value("template", std::string());
    if (h.name.empty()) throw ConfigError("heuristics file: entry without a name");
    h.check();
    out.push_back(std::move(h));
  }
  return out;
}

struct EvolveOptions {
  std::uint64_t rng_seed = 0;
  std::string model_id;
  Decoding decoding{1.0, 2048};
  std::filesystem::path state_path;  // empty -> no checkpointing
};

struct EvolveStats {
  std::size_t evolved = 0;
  std::size_t failed = 0;
  double spend = 0.0;

  nlohmann::json to_json() const {
    return nlohmann::json{{"evolved", evolved}, {"failed", failed}, {"spend_usd", spend}};
  }
};

struct EvolveOutcome {
  Corpus children;
  EvolveStats stats;
};

/// One evolution round: one child per input sample, heuristic chosen
/// uniformly at random per sample. Children carry round = parent round + 1.
/// Deterministic for fixed seeds; checkpointed per child like fuse_until.
inline EvolveOutcome evolve_round(const Corpus& c, const std::vector<EvolHeuristic>& heuristics,
                                  CompletionBackend& backend, const EvolveOptions& opts = {}) {
  if (heuristics.empty()) throw ConfigError("evolve_round: no heuristics configured");
  for (const auto& h : heuristics) h.check();

  nlohmann::json hj = nlohmann::json::array();
  for (const auto& h : heuristics) hj.push_back({{"name", h.name}, {"template", h.prompt_template}});
  nlohmann::json opt_json{{"rng_seed", opts.rng_seed},
                          {"model_id", opts.model_id},
                          {"temperature", opts.decoding.temperature},
                          {"max_output_tokens", opts.decoding.max_output_tokens},
                          {"heuristics", hj}};
  const std::string config_hash = detail::fusion_config_hash(c, opt_json, backend.id(), "evolve");

  EvolveOutcome out;
  out.children.name = c.name + "-evolved";
  out.children.provenance["parent_corpus"] = c.name;
  out.children.provenance["rng_seed"] = opts.rng_seed;
  out.children.provenance["backend_id"] = backend.id();

  std::size_t resume_done = 0;
  const std::filesystem::path log_path =
      opts.state_path.empty() ? std::filesystem::path()
                              : std::filesystem::path(opts.state_path.string() + ".children.jsonl");
  if (!opts.state_path.empty() && std::filesystem::exists(opts.state_path)) {
    nlohmann::json st = nlohmann::json::parse(read_file(opts.state_path));
    if (st.value("config_hash", std::string()) != config_hash) {
      throw ConfigError("evolve state at " + opts.state_path.string() +
                        " was produced by a different configuration; refusing to resume");
    }
    out.stats.spend = st.value("spend_usd", 0.0);
    const std::size_t done = st.value("done", std::size_t{0});
    for (const auto& line : detail::read_checkpoint_lines(log_path, done)) {
      const nlohmann::json rec = nlohmann::json::parse(line);
      if (rec.value("failed", false)) {
        ++out.stats.failed;
      } else {
        out.children.samples.push_back(sample_from_json(rec.at("child"), resume_done + 1));
        ++out.stats.evolved;
      }
      ++resume_done;
    }
    if (resume_done != done) throw Error("evolve checkpoint corrupt: missing child lines");
  }

  auto write_state = [&](bool complete) {
    if (opts.state_path.empty()) return;
    nlohmann::json st{{"schema_version", 1},
                      {"kind", "evolve"},
                      {"config_hash", config_hash},
                      {"done", out.stats.evolved + out.stats.failed},
                      {"spend_usd", out.stats.spend},
                      {"complete", complete}};
    write_file_atomic(opts.state_path, st.dump(2) + "\n");
  };

  for (std::size_t i = resume_done; i < c.samples.size(); ++i) {
    const Sample& parent = c.samples[i];
    Rng rng(mix64(opts.rng_seed, mix64(0xe701, i)));
    const EvolHeuristic& h = heuristics[rng.below(heuristics.size())];
    nlohmann::json log{{"id", parent.id}, {"heuristic", h.name}};
    try {
      BackendRequest req = BackendRequest::complete_of(
          opts.model_id, build_evolve_prompt(parent.instruction, h), opts.decoding);
      BackendResult res = backend.complete(req);
      out.stats.spend += res.cost_estimate;
      const std::string text = trim(res.text);
      if (text.empty()) throw BackendError("backend returned an empty evolution");
      Sample child;
      child.instruction = text;
      child.origin = Origin::evolved;
      child.parents = {parent.id};
      child.round = parent.round + 1;
      child.id = "evolved-" + content_hash_hex(parent.id + "\x1f" + text + "\x1f" +
                                               std::to_string(child.round) + "\x1f" +
                                               std::to_string(i));
      log["child"] = sample_to_json(child);
      out.children.samples.push_back(std::move(child));
      ++out.stats.evolved;
    } catch (const SpendCapError&) {
      write_state(false);
      throw;
    } catch (const BackendError& e) {
      ++out.stats.failed;
      log["failed"] = true;
      log["error"] = e.what();
    }
    if (!opts.state_path.empty()) {
      detail::append_line(log_path, log.dump());
      write_state(false);
    }
  }
  write_state(true);
  return out;
}

/// Mean per-child token growth for one round: mean(child tokens - parent tokens).
inline double token_growth(const Corpus& parents, const Corpus& children, const Tokenizer& tok) {
  if (children.empty()) return 0.0;
  std::unordered_map<std::string, const Sample*> by_id;
  for (const auto& p : parents.samples) by_id[p.id] = &p;
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& ch : children.samples) {
    if (ch.parents.size() != 1) continue;
    auto it = by_id.find(ch.parents[0]);
    if (it == by_id.end()) continue;
    sum += static_cast<double>(tok.count(ch.instruction)) -
           static_cast<double>(tok.count(it->second->instruction));
    ++n;
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

}  // namespace iftk
