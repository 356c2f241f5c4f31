#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "iftk/errors.hpp"
#include "iftk/tokenizer.hpp"
#include "iftk/util.hpp"

namespace iftk {

using json = nlohmann::json;

enum class Language { python, non_python, unknown };
enum class Origin { seed, fused, evolved };

inline std::string to_string(Origin o) {
  switch (o) {
    case Origin::seed: return "seed";
    case Origin::fused: return "fused";
    case Origin::evolved: return "evolved";
  }
  return "seed";
}

inline Origin origin_from_string(const std::string& s) {
  if (s == "seed") return Origin::seed;
  if (s == "fused") return Origin::fused;
  if (s == "evolved") return Origin::evolved;
  throw CorpusError("unknown origin: " + s);
}

/// One (instruction, response) pair with lineage metadata.
struct Sample {
  std::string id;
  std::string instruction;
  std::string response;
  Language language = Language::unknown;
  std::string language_label;  // free-form tag, e.g. "java"; empty if none
  Origin origin = Origin::seed;
  std::vector<std::string> parents;
  int round = 0;
  json extra = json::object();  // unrecognized JSONL fields, preserved round-trip

  /// Enforces the per-sample lineage invariants.
  void check() const {
    if (instruction.empty()) throw CorpusError("sample " + id + ": empty instruction");
    const std::size_t want = origin == Origin::fused ? 2 : origin == Origin::evolved ? 1 : 0;
    if (parents.size() != want) {
      throw CorpusError("sample " + id + ": origin " + to_string(origin) + " requires " +
                        std::to_string(want) + " parents, has " + std::to_string(parents.size()));
    }
    if (round < 0) throw CorpusError("sample " + id + ": negative round");
  }
};

/// An ordered, named collection of samples.
struct Corpus {
  std::string name;
  std::vector<Sample> samples;
  json provenance = json::object();

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }

  std::unordered_set<std::string> id_set() const {
    std::unordered_set<std::string> ids;
    ids.reserve(samples.size());
    for (const auto& s : samples) ids.insert(s.id);
    return ids;
  }
};

/// Verifies id uniqueness, per-sample invariants, and that every referenced
/// parent id resolves within this corpus or the supplied external id set.
/// With `allow_external_parents`, unresolved parents are accepted (lineage
/// that lives in another file).
inline void check_integrity(const Corpus& c,
                            const std::unordered_set<std::string>* external_ids = nullptr,
                            bool allow_external_parents = false) {
  std::unordered_set<std::string> ids;
  ids.reserve(c.samples.size());
  for (const auto& s : c.samples) {
    if (s.id.empty()) throw CorpusError("corpus " + c.name + ": sample with empty id");
    if (!ids.insert(s.id).second) {
      throw CorpusError("corpus " + c.name + ": duplicate id " + s.id);
    }
    s.check();
  }
  if (allow_external_parents) return;
  for (const auto& s : c.samples) {
    for (const auto& p : s.parents) {
      if (ids.count(p)) continue;
      if (external_ids && external_ids->count(p)) continue;
      throw CorpusError("corpus " + c.name + ": sample " + s.id +
                        " references unknown parent " + p);
    }
  }
}

namespace detail {

inline const std::unordered_set<std::string>& known_record_keys() {
  static const std::unordered_set<std::string> keys = {
      "id", "instruction", "response", "language", "origin", "parents", "round"};
  return keys;
}

inline std::pair<Language, std::string> parse_language(const std::string& raw) {
  if (raw.empty()) return {Language::unknown, ""};
  const std::string low = to_lower_ascii(raw);
  if (low == "python" || low == "python3" || low == "py") return {Language::python, ""};
  if (low == "non_python" || low == "non-python") return {Language::non_python, ""};
  if (low == "unknown") return {Language::unknown, ""};
  return {Language::non_python, raw};
}

}  // namespace detail

inline json sample_to_json(const Sample& s) {
  json rec = s.extra.is_object() ? s.extra : json::object();
  rec["id"] = s.id;
  rec["instruction"] = s.instruction;
  rec["response"] = s.response;
  switch (s.language) {
    case Language::python: rec["language"] = "python"; break;
    case Language::non_python:
      rec["language"] = s.language_label.empty() ? "non_python" : s.language_label;
      break;
    case Language::unknown: rec.erase("language"); break;
  }
  rec["origin"] = to_string(s.origin);
  rec["parents"] = s.parents;
  rec["round"] = s.round;
  return rec;
}

inline Sample sample_from_json(const json& rec, std::size_t line_no) {
  const std::string where = "line " + std::to_string(line_no);
  if (!rec.is_object()) throw CorpusError(where + ": record is not a JSON object");
  if (!rec.contains("instruction") || !rec["instruction"].is_string()) {
    throw CorpusError(where + ": missing instruction");
  }
  Sample s;
  s.instruction = rec["instruction"].get<std::string>();
  if (s.instruction.empty()) throw CorpusError(where + ": missing instruction");
  s.response = rec.value("response", std::string());
  if (rec.contains("language") && rec["language"].is_string()) {
    auto [lang, label] = detail::parse_language(rec["language"].get<std::string>());
    s.language = lang;
    s.language_label = label;
  }
  s.origin = origin_from_string(rec.value("origin", std::string("seed")));
  if (rec.contains("parents")) {
    if (!rec["parents"].is_array()) throw CorpusError(where + ": parents must be an array");
    for (const auto& p : rec["parents"]) s.parents.push_back(p.get<std::string>());
  }
  s.round = rec.value("round", 0);
  s.id = rec.value("id", std::string());
  for (const auto& item : rec.items()) {
    if (!detail::known_record_keys().count(item.key())) s.extra[item.key()] = item.value();
  }
  try {
    s.check();
  } catch (const CorpusError& e) {
    throw CorpusError(where + ": " + e.what());
  }
  return s;
}

/// Loads a JSONL corpus. Records without an id get a deterministic content
/// hash id; identical duplicate content is disambiguated by occurrence index.
/// Parent ids must resolve in the file itself or in `ancestor_ids`; pass
/// `allow_external_parents` when the lineage lives in another file.
inline Corpus load_corpus(const std::filesystem::path& path,
                          const std::unordered_set<std::string>* ancestor_ids = nullptr,
                          bool allow_external_parents = false) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open corpus file: " + path.string());
  Corpus c;
  c.name = path.stem().string();
  c.provenance["source_path"] = path.string();
  std::unordered_map<std::string, int> hash_uses;
  std::unordered_set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw CorpusError("line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
    }
    Sample s = sample_from_json(rec, line_no);
    if (s.id.empty()) {
      const std::string base =
          content_hash_hex(s.instruction + "\x1f" + s.response + "\x1f" + to_string(s.origin));
      const int n = ++hash_uses[base];
      s.id = n == 1 ? base : base + "-" + std::to_string(n);
    }
    if (!ids.insert(s.id).second) {
      throw CorpusError("line " + std::to_string(line_no) + ": duplicate id " + s.id);
    }
    c.samples.push_back(std::move(s));
  }
  check_integrity(c, ancestor_ids, allow_external_parents);
  return c;
}

/// Loads without resolving parent lineage; for commands that operate on a
/// derived corpus whose parents live in an ancestor file.
inline Corpus load_corpus_lenient(const std::filesystem::path& path) {
  return load_corpus(path, nullptr, /*allow_external_parents=*/true);
}

inline void save_corpus(const Corpus& c, const std::filesystem::path& path) {
  std::string out;
  for (const auto& s : c.samples) {
    out += sample_to_json(s).dump();
    out.push_back('\n');
  }
  write_file_atomic(path, out);
}

// ---------------------------------------------------------------------------
// Language partitioning.
// ---------------------------------------------------------------------------

namespace detail {

/// Heuristic cues that an instruction is about Python. Checked in order;
/// the first hit names the decisive rule.
inline const char* python_cue(const std::string& instruction) {
  const std::string low = to_lower_ascii(instruction);
  if (low.find("```python") != std::string::npos) return "fenced_block";
  // Word-boundary "python" mention.
  std::size_t pos = 0;
  while ((pos = low.find("python", pos)) != std::string::npos) {
    const bool left_ok = pos == 0 || !BuiltinTokenizer::is_word_char(
                                         static_cast<unsigned char>(low[pos - 1]));
    const std::size_t end = pos + 6;
    const bool right_ok = end >= low.size() || !BuiltinTokenizer::is_word_char(
                                                   static_cast<unsigned char>(low[end]));
    if (left_ok && right_ok) return "keyword";
    pos = end;
  }
  static const char* kSyntaxCues[] = {"def ",      "import ",  "print(",  "self.",
                                      "__init__",  "lambda ",  "elif ",   "numpy",
                                      "pandas",    ".py ",     "pip install"};
  for (const char* cue : kSyntaxCues) {
    if (low.find(cue) != std::string::npos) return "syntax_cue";
  }
  return nullptr;
}

}  // namespace detail

enum class Classifier {
  heuristic,       // explicit field wins, else text cues decide
  field_override,  // only the explicit field decides; unset means non-python
};

struct PartitionResult {
  Corpus python;
  Corpus non_python;
  // rule -> number of samples decided by it
  std::map<std::string, std::size_t> rule_counts;
  // sample id -> decisive rule, for the decision log
  std::vector<std::pair<std::string, std::string>> decisions;
};

/// Splits a corpus into Python and non-Python halves. Outputs are disjoint
/// and exhaustive; samples no rule claims fall to the non-Python side.
inline PartitionResult partition_by_language(const Corpus& c,
                                             Classifier classifier = Classifier::heuristic) {
  PartitionResult r;
  r.python.name = c.name + "-python";
  r.non_python.name = c.name + "-non-python";
  for (const auto& s : c.samples) {
    std::string rule;
    bool is_python = false;
    if (s.language == Language::python) {
      rule = "explicit_field";
      is_python = true;
    } else if (s.language == Language::non_python) {
      rule = "explicit_field";
      is_python = false;
    } else if (classifier == Classifier::heuristic) {
      if (const char* cue = detail::python_cue(s.instruction)) {
        rule = cue;
        is_python = true;
      } else {
        rule = "default_non_python";
        is_python = false;
      }
    } else {
      rule = "default_non_python";
      is_python = false;
    }
    (is_python ? r.python : r.non_python).samples.push_back(s);
    ++r.rule_counts[rule];
    r.decisions.emplace_back(s.id, rule);
  }
  json counts = json::object();
  for (const auto& [k, v] : r.rule_counts) counts[k] = v;
  for (Corpus* out : {&r.python, &r.non_python}) {
    out->provenance["parent_corpus"] = c.name;
    out->provenance["classifier"] =
        classifier == Classifier::heuristic ? "heuristic" : "field_override";
    out->provenance["rule_counts"] = counts;
  }
  return r;
}

/// Parameters for the partition-then-split construction: classify by
/// language, then carve `split_size` random samples out of the python side.
struct PartitionSpec {
  Classifier classifier = Classifier::heuristic;
  std::size_t split_size = 0;
  std::uint64_t rng_seed = 0;

  struct Outcome {
    Corpus python;
    Corpus non_python;
    Corpus selected;  // split_size random samples of python
    Corpus rest;      // the remaining python samples
  };

  void validate(const Corpus& c) const {
    if (split_size > c.size()) {
      throw CorpusError("PartitionSpec: split_size " + std::to_string(split_size) +
                        " exceeds corpus size " + std::to_string(c.size()));
    }
  }

  Outcome apply(const Corpus& c) const;
};

// ---------------------------------------------------------------------------
// Random split.
// ---------------------------------------------------------------------------

/// Selects k samples uniformly without replacement (partial Fisher-Yates over
/// indices), preserving original order inside each output. Deterministic for
/// a fixed seed.
inline std::pair<Corpus, Corpus> split_random(const Corpus& c, std::size_t k,
                                              std::uint64_t rng_seed) {
  if (k > c.size()) {
    throw CorpusError("split_random: k=" + std::to_string(k) + " exceeds corpus size " +
                      std::to_string(c.size()));
  }
  std::vector<std::size_t> idx(c.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(rng_seed);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  std::vector<bool> selected(c.size(), false);
  for (std::size_t i = 0; i < k; ++i) selected[idx[i]] = true;

  std::pair<Corpus, Corpus> out;
  out.first.name = c.name + "-selected";
  out.second.name = c.name + "-rest";
  for (std::size_t i = 0; i < c.size(); ++i) {
    (selected[i] ? out.first : out.second).samples.push_back(c.samples[i]);
  }
  for (Corpus* half : {&out.first, &out.second}) {
    half->provenance["parent_corpus"] = c.name;
    half->provenance["split_k"] = k;
    half->provenance["rng_seed"] = rng_seed;
  }
  return out;
}

inline PartitionSpec::Outcome PartitionSpec::apply(const Corpus& c) const {
  validate(c);
  PartitionResult part = partition_by_language(c, classifier);
  if (split_size > part.python.size()) {
    throw CorpusError("PartitionSpec: split_size " + std::to_string(split_size) +
                      " exceeds python partition size " + std::to_string(part.python.size()));
  }
  auto [selected, rest] = split_random(part.python, split_size, rng_seed);
  Outcome out;
  out.python = std::move(part.python);
  out.non_python = std::move(part.non_python);
  out.selected = std::move(selected);
  out.rest = std::move(rest);
  return out;
}

// ---------------------------------------------------------------------------
// Deduplication.
// ---------------------------------------------------------------------------

/// Removes samples whose normalized instruction text repeats an earlier one.
/// First occurrence wins; relative order is preserved. Idempotent.
inline Corpus dedup(const Corpus& c) {
  Corpus out;
  out.name = c.name;
  out.provenance = c.provenance;
  std::unordered_set<std::string> seen;
  std::size_t dropped = 0;
  for (const auto& s : c.samples) {
    if (seen.insert(normalize_text(s.instruction)).second) {
      out.samples.push_back(s);
    } else {
      ++dropped;
    }
  }
  out.provenance["dedup_dropped"] = dropped;
  return out;
}

// ---------------------------------------------------------------------------
// Token statistics.
// ---------------------------------------------------------------------------

struct TokenStatsReport {
  std::string corpus_name;
  std::size_t n_samples = 0;
  double instruction_mean_tokens = 0.0;
  double response_mean_tokens = 0.0;
  std::string tokenizer_id;

  json to_json() const {
    return json{{"corpus", corpus_name},
                {"n_samples", n_samples},
                {"instruction_mean_tokens", instruction_mean_tokens},
                {"response_mean_tokens", response_mean_tokens},
                {"tokenizer_id", tokenizer_id}};
  }
};

struct TokenCounts {
  std::size_t instruction_tokens = 0;
  std::size_t response_tokens = 0;
};

/// Per-sample counts, recomputed on demand (never stored on the sample).
inline TokenCounts sample_token_counts(const Sample& s, const Tokenizer& tok) {
  return {tok.count(s.instruction), tok.count(s.response)};
}

inline TokenStatsReport token_stats(const Corpus& c, const Tokenizer& tok) {
  TokenStatsReport r;
  r.corpus_name = c.name;
  r.n_samples = c.size();
  r.tokenizer_id = tok.id();
  if (c.empty()) return r;
  double inst_sum = 0.0;
  double resp_sum = 0.0;
  for (const auto& s : c.samples) {
    inst_sum += static_cast<double>(tok.count(s.instruction));
    resp_sum += static_cast<double>(tok.count(s.response));
  }
  r.instruction_mean_tokens = inst_sum / static_cast<double>(c.size());
  r.response_mean_tokens = resp_sum / static_cast<double>(c.size());
  return r;
}

}  // namespace iftk
