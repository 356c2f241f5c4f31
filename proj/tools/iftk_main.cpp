// iftk: generate and analyze instruction-tuning datasets.
//
// Subcommands: partition, split, fuse, collect, evolve, dedup, stats,
// metrics {uniformity, ambiguity, export-embeddings}, run, report,
// estimate-cost. Exit codes: 0 success, 2 config error, 3 backend failure,
// 4 spend-cap halt.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "iftk/iftk.hpp"

namespace fs = std::filesystem;
using iftk::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitBackend = 3;
constexpr int kExitSpendCap = 4;

struct BackendFlags {
  std::string config_path;
  std::string backend;  // mock | http
  std::string model;
  std::optional<std::uint64_t> mock_seed;
  std::optional<double> mock_invalid_p;
  std::string mock_behavior;
  std::optional<double> spend_cap;
  std::string cache_dir;

  void attach(CLI::App* cmd, bool with_backend = true) {
    cmd->add_option("--config", config_path, "key = value config file");
    if (with_backend) {
      cmd->add_option("--backend", backend, "backend name: mock or http");
      cmd->add_option("--model", model, "model id override");
      cmd->add_option("--mock-seed", mock_seed, "mock backend RNG seed");
      cmd->add_option("--mock-invalid-p", mock_invalid_p,
                      "mock probability of the INVALID PROMPT sentinel");
      cmd->add_option("--mock-behavior", mock_behavior,
                      "mock output style: fuse, echo, hash, append:<suffix>");
      cmd->add_option("--spend-cap", spend_cap, "spend cap in USD");
      cmd->add_option("--cache-dir", cache_dir, "content-addressed request cache directory");
    }
  }

  iftk::KeyValueConfig merge() const {
    iftk::KeyValueConfig cfg;
    if (!config_path.empty()) cfg = iftk::KeyValueConfig::parse_file(config_path);
    if (!backend.empty()) cfg.set("backend.kind", backend);
    if (!model.empty()) cfg.set("backend.model", model);
    if (mock_seed) cfg.set("backend.mock_seed", std::to_string(*mock_seed));
    if (mock_invalid_p) cfg.set("backend.mock_invalid_p", std::to_string(*mock_invalid_p));
    if (!mock_behavior.empty()) cfg.set("backend.mock_behavior", mock_behavior);
    if (spend_cap) cfg.set("spend_cap_usd", std::to_string(*spend_cap));
    if (!cache_dir.empty()) cfg.set("cache_dir", cache_dir);
    return cfg;
  }
};

void save_fusion_stats(const iftk::FusionStats& stats, const fs::path& out_path) {
  iftk::write_file_atomic(out_path.string() + ".stats.json", stats.to_json().dump(2) + "\n");
}

void require_file(const std::string& path, const char* what) {
  if (!fs::exists(path)) {
    throw iftk::ConfigError(std::string(what) + " not found: " + path);
  }
}

int cmd_partition(const std::string& in, const std::string& out_python,
                  const std::string& out_non_python, const std::string& decisions) {
  require_file(in, "input corpus");
  iftk::Corpus c = iftk::load_corpus_lenient(in);
  iftk::PartitionResult r = iftk::partition_by_language(c);
  iftk::save_corpus(r.python, out_python);
  iftk::save_corpus(r.non_python, out_non_python);
  if (!decisions.empty()) {
    std::string tsv;
    for (const auto& [id, rule] : r.decisions) tsv += id + "\t" + rule + "\n";
    iftk::write_file_atomic(decisions, tsv);
  }
  std::cout << "partitioned " << c.size() << " samples: " << r.python.size() << " python, "
            << r.non_python.size() << " non-python\n";
  return kExitOk;
}

int cmd_split(const std::string& in, std::size_t k, std::uint64_t seed,
              const std::string& out_selected, const std::string& out_rest) {
  require_file(in, "input corpus");
  iftk::Corpus c = iftk::load_corpus_lenient(in);
  auto [sel, rest] = iftk::split_random(c, k, seed);
  iftk::save_corpus(sel, out_selected);
  iftk::save_corpus(rest, out_rest);
  std::cout << "split " << c.size() << " samples into " << sel.size() << " + " << rest.size()
            << " (seed " << seed << ")\n";
  return kExitOk;
}

int cmd_dedup(const std::string& in, const std::string& out) {
  require_file(in, "input corpus");
  iftk::Corpus c = iftk::load_corpus_lenient(in);
  iftk::Corpus d = iftk::dedup(c);
  iftk::save_corpus(d, out);
  std::cout << "dedup kept " << d.size() << " of " << c.size() << " samples\n";
  return kExitOk;
}

int cmd_stats(const std::string& in, const std::string& tokenizer_spec, const std::string& out) {
  require_file(in, "input corpus");
  iftk::Corpus c = iftk::load_corpus_lenient(in);
  auto tok = iftk::make_tokenizer(tokenizer_spec);
  iftk::TokenStatsReport r = iftk::token_stats(c, *tok);
  if (!out.empty()) iftk::write_file_atomic(out, r.to_json().dump(2) + "\n");
  std::cout << "corpus " << r.corpus_name << ": n=" << r.n_samples
            << " instruction_mean_tokens=" << r.instruction_mean_tokens
            << " response_mean_tokens=" << r.response_mean_tokens << " tokenizer=" << r.tokenizer_id
            << "\n";
  return kExitOk;
}

int cmd_fuse(const BackendFlags& flags, const std::string& seeds_path, std::size_t count,
             std::uint64_t seed, const std::string& out, const std::string& resume,
             bool allow_repeat, bool no_dedup, std::size_t stop_after) {
  iftk::KeyValueConfig cfg = flags.merge();
  require_file(seeds_path, "seed corpus");
  iftk::Backends b = iftk::make_backends(cfg);
  iftk::Corpus seeds = iftk::load_corpus_lenient(seeds_path);

  iftk::FusionPolicy policy;
  policy.target_count = count;
  policy.rng_seed = seed;
  policy.max_attempts_per_slot =
      static_cast<std::size_t>(cfg.get_int("fusion.max_attempts_per_slot", 20));
  policy.max_total_attempts =
      static_cast<std::size_t>(cfg.get_int("fusion.max_total_attempts", 0));
  policy.allow_same_parent_twice = allow_repeat || cfg.get_bool("fusion.allow_repeat_parents", false);
  policy.dedup_children = no_dedup ? false : cfg.get_bool("fusion.dedup_children", true);
  policy.concurrency = static_cast<std::size_t>(cfg.get_int("backend.max_in_flight", 1));
  policy.model_id = b.completion_model;
  policy.decoding = b.fusion_decoding;

  iftk::FuseOptions opts;
  opts.state_path = resume.empty() ? out + ".state.json" : resume;
  opts.stop_after = stop_after;
  try {
    iftk::FusionOutcome outcome = iftk::fuse_until(seeds, policy, b.completion(), opts);
    iftk::save_corpus(outcome.fused, out);
    save_fusion_stats(outcome.stats, out);
    std::cout << "fused " << outcome.fused.size() << "/" << policy.target_count
              << (outcome.complete ? " (complete)" : " (stopped; resumable)")
              << " attempts=" << outcome.stats.attempts << " invalid=" << outcome.stats.invalid_count
              << " duplicates=" << outcome.stats.duplicate_count
              << " pass_rate=" << outcome.stats.pass_rate() << "\n";
    return kExitOk;
  } catch (const iftk::FusionExhausted& e) {
    iftk::save_corpus(e.partial, out);
    save_fusion_stats(e.stats, out);
    std::cerr << "error: " << e.what() << " (partial corpus written to " << out << ")\n";
    return kExitBackend;
  }
}

int cmd_collect(const BackendFlags& flags, const std::string& in, const std::string& out,
                const std::string& resume) {
  iftk::KeyValueConfig cfg = flags.merge();
  require_file(in, "input corpus");
  iftk::Backends b = iftk::make_backends(cfg);
  iftk::Corpus c = iftk::load_corpus_lenient(in);
  iftk::CollectOptions opts;
  opts.model_id = b.completion_model;
  opts.decoding = b.response_decoding;
  opts.state_path = resume.empty() ? out + ".state.json" : resume;
  iftk::CollectOutcome outcome = iftk::collect_responses(c, b.completion(), opts);
  iftk::save_corpus(outcome.corpus, out);
  iftk::write_file_atomic(out + ".stats.json", outcome.stats.to_json().dump(2) + "\n");
  std::cout << "collected responses: filled=" << outcome.stats.filled
            << " failed=" << outcome.stats.failed << " skipped=" << outcome.stats.skipped << "\n";
  return outcome.stats.failed == 0 ? kExitOk : kExitBackend;
}

int cmd_evolve(const BackendFlags& flags, const std::string& seeds_path, std::size_t rounds,
               const std::string& heuristics_path, std::uint64_t seed, const std::string& out) {
  iftk::KeyValueConfig cfg = flags.merge();
  require_file(seeds_path, "seed corpus");
  iftk::Backends b = iftk::make_backends(cfg);
  iftk::Corpus seeds = iftk::load_corpus_lenient(seeds_path);
  const auto heuristics = heuristics_path.empty() ? iftk::default_heuristics()
                                                  : iftk::load_heuristics(heuristics_path);
  iftk::Corpus all_children;
  all_children.name = seeds.name + "-evolved";
  all_children.provenance["parent_corpus"] = seeds.name;
  all_children.provenance["rounds"] = rounds;
  all_children.provenance["rng_seed"] = seed;

  iftk::Corpus current = seeds;
  iftk::BuiltinTokenizer tok;
  double total_spend = 0.0;
  for (std::size_t round = 0; round < rounds; ++round) {
    iftk::EvolveOptions opts;
    opts.rng_seed = iftk::mix64(seed, round);
    opts.model_id = b.completion_model;
    opts.decoding = b.fusion_decoding;
    opts.state_path = out + ".round" + std::to_string(round + 1) + ".state.json";
    iftk::EvolveOutcome r = iftk::evolve_round(current, heuristics, b.completion(), opts);
    total_spend += r.stats.spend;
    std::cout << "round " << (round + 1) << ": evolved=" << r.stats.evolved
              << " failed=" << r.stats.failed
              << " mean_token_growth=" << iftk::token_growth(current, r.children, tok) << "\n";
    all_children.samples.insert(all_children.samples.end(), r.children.samples.begin(),
                                r.children.samples.end());
    current = std::move(r.children);
    if (current.empty()) break;
  }
  const auto seed_ids = seeds.id_set();
  iftk::check_integrity(all_children, &seed_ids);
  iftk::save_corpus(all_children, out);
  std::cout << "evolved " << all_children.size() << " children over " << rounds
            << " rounds (spend_usd=" << total_spend << ")\n";
  return kExitOk;
}

int cmd_metrics_uniformity(const BackendFlags& flags, const std::string& in,
                           const std::string& embedder, std::size_t dim, const std::string& out) {
  iftk::KeyValueConfig cfg = flags.merge();
  if (!embedder.empty()) cfg.set("metrics.embedder", embedder);
  cfg.set("metrics.embed_dim", std::to_string(dim));
  require_file(in, "input corpus");
  iftk::Backends b = iftk::make_backends(cfg);
  iftk::Corpus c = iftk::load_corpus_lenient(in);
  iftk::UniformityResult u = iftk::uniformity(iftk::embed_corpus(c, b.embedder()));
  if (!out.empty()) iftk::write_file_atomic(out, u.to_json().dump(2) + "\n");
  std::cout << "uniformity: corpus=" << c.name << " n=" << u.distances.size() << " mu=" << u.mu
            << " U=" << u.u << " provider=" << u.provider_id << "\n";
  return kExitOk;
}

int cmd_metrics_ambiguity(const BackendFlags& flags, const std::string& in,
                          const std::string& scorer, const std::string& perturber, std::size_t k,
                          const std::string& out, const std::string& points) {
  iftk::KeyValueConfig cfg = flags.merge();
  if (!scorer.empty()) cfg.set("scorer", scorer);
  require_file(in, "input corpus");
  iftk::Backends b = iftk::make_backends(cfg);
  iftk::Corpus c = iftk::load_corpus_lenient(in);

  std::unique_ptr<iftk::Perturber> p;
  if (perturber == "token-drop") {
    p = std::make_unique<iftk::TokenDropPerturber>();
  } else if (perturber == "llm") {
    p = std::make_unique<iftk::LlmParaphrasePerturber>(b.completion(), b.completion_model);
  } else {
    throw iftk::ConfigError("unknown perturber: " + perturber);
  }
  iftk::AmbiguityReport r = iftk::ambiguity_report(c, b.scorer(), *p, k);
  if (!out.empty()) iftk::write_file_atomic(out, r.to_json().dump(2) + "\n");
  if (!points.empty()) r.write_points(points);
  std::cout << "ambiguity: corpus=" << c.name << " scored=" << r.scores.size()
            << " failed=" << r.failures.size() << " mean_uncertainty=" << r.mean_uncertainty()
            << " mean_prediction_probability=" << r.mean_prediction_probability() << "\n";
  return kExitOk;
}

int cmd_metrics_export(const BackendFlags& flags, const std::string& in, const std::string& out,
                       const std::string& embedder, std::size_t dim) {
  iftk::KeyValueConfig cfg = flags.merge();
  if (!embedder.empty()) cfg.set("metrics.embedder", embedder);
  cfg.set("metrics.embed_dim", std::to_string(dim));
  require_file(in, "input corpus");
  iftk::Backends b = iftk::make_backends(cfg);
  iftk::Corpus c = iftk::load_corpus_lenient(in);
  if (c.empty()) {
    // Header-only file so downstream tooling still sees a valid table.
    iftk::EmbeddingMatrix empty;
    empty.dim = dim;
    empty.provider_id = b.embedder().id();
    iftk::export_embeddings(empty, out);
  } else {
    iftk::export_embeddings(iftk::embed_corpus(c, b.embedder()), out);
  }
  std::cout << "exported " << c.size() << " embeddings to " << out << "\n";
  return kExitOk;
}

int cmd_run(const std::string& config_path) {
  if (config_path.empty()) throw iftk::ConfigError("run: --config is required");
  iftk::KeyValueConfig cfg = iftk::KeyValueConfig::parse_file(config_path);
  iftk::JobResult r = iftk::run_job(cfg);
  std::cout << r.report.render_text();
  std::cout << "job " << r.state.job_id << " complete; spend_usd=" << r.state.spend_usd
            << "; outputs in " << r.out_dir.string() << "\n";
  return kExitOk;
}

int cmd_report(const std::string& stats_path, const std::string& out) {
  require_file(stats_path, "stats file");
  iftk::RunReport r =
      iftk::RunReport::from_json(json::parse(iftk::read_file(stats_path)));
  const std::string text = r.render_text();
  if (!out.empty()) iftk::write_file_atomic(out, text);
  std::cout << text;
  return kExitOk;
}

int cmd_estimate_cost(const BackendFlags& flags, std::size_t requests, double avg_in,
                      double avg_out, const std::string& model, double price_in,
                      double price_out) {
  iftk::ModelPrice price{price_in, price_out};
  if (price_in <= 0.0 && price_out <= 0.0) {
    iftk::KeyValueConfig cfg = flags.merge();
    const std::string m = model.empty() ? cfg.get("backend.model", "gpt-4-1106-preview") : model;
    auto found = cfg.price_table().find(m);
    if (!found) throw iftk::ConfigError("no price configured for model " + m);
    price = *found;
  }
  const double cost = requests == 0 ? 0.0 : iftk::estimate_cost(requests, avg_in, avg_out, price);
  std::cout << cost << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"instruction fusion toolkit"};
  app.require_subcommand(1);

  // partition
  auto* partition = app.add_subcommand("partition", "split a corpus by programming language");
  std::string p_in, p_out_py, p_out_non, p_decisions;
  partition->add_option("--in", p_in)->required();
  partition->add_option("--out-python", p_out_py)->required();
  partition->add_option("--out-non-python", p_out_non)->required();
  partition->add_option("--decisions", p_decisions, "write per-sample rule decisions TSV");

  // split
  auto* split = app.add_subcommand("split", "random split into selected + rest");
  std::string s_in, s_out_sel, s_out_rest;
  std::size_t s_k = 0;
  std::uint64_t s_seed = 0;
  split->add_option("--in", s_in)->required();
  split->add_option("--k", s_k)->required();
  split->add_option("--seed", s_seed)->required();
  split->add_option("--out-selected", s_out_sel)->required();
  split->add_option("--out-rest", s_out_rest)->required();

  // dedup
  auto* dd = app.add_subcommand("dedup", "drop samples with duplicate normalized instructions");
  std::string d_in, d_out;
  dd->add_option("--in", d_in)->required();
  dd->add_option("--out", d_out)->required();

  // stats
  auto* stats = app.add_subcommand("stats", "token statistics for a corpus");
  std::string st_in, st_tok = "builtin", st_out;
  stats->add_option("--in", st_in)->required();
  stats->add_option("--tokenizer", st_tok, "builtin or cmd:<shell command>");
  stats->add_option("--out", st_out, "write the report JSON here");

  // fuse
  auto* fuse = app.add_subcommand("fuse", "generate fused children until the target count");
  BackendFlags fuse_flags;
  std::string f_seeds, f_out, f_resume;
  std::size_t f_count = 0, f_stop_after = 0;
  std::uint64_t f_seed = 0;
  bool f_allow_repeat = false, f_no_dedup = false;
  fuse->add_option("--seeds", f_seeds)->required();
  fuse->add_option("--count", f_count)->required();
  fuse->add_option("--seed", f_seed)->required();
  fuse->add_option("--out", f_out)->required();
  fuse->add_option("--resume", f_resume, "state path (defaults to <out>.state.json)");
  fuse->add_flag("--allow-repeat-parents", f_allow_repeat);
  fuse->add_flag("--no-dedup", f_no_dedup);
  fuse->add_option("--stop-after", f_stop_after,
                   "accept at most N children this invocation, then checkpoint and exit");
  fuse_flags.attach(fuse);

  // collect
  auto* collect = app.add_subcommand("collect", "fill responses for every sample");
  BackendFlags collect_flags;
  std::string c_in, c_out, c_resume;
  collect->add_option("--in", c_in)->required();
  collect->add_option("--out", c_out)->required();
  collect->add_option("--resume", c_resume, "state path (defaults to <out>.state.json)");
  collect_flags.attach(collect);

  // evolve
  auto* evolve = app.add_subcommand("evolve", "template-driven evolution rounds");
  BackendFlags evolve_flags;
  std::string e_seeds, e_heuristics, e_out;
  std::size_t e_rounds = 1;
  std::uint64_t e_seed = 0;
  evolve->add_option("--seeds", e_seeds)->required();
  evolve->add_option("--rounds", e_rounds)->required();
  evolve->add_option("--heuristics", e_heuristics, "JSON heuristics file (default built-in set)");
  evolve->add_option("--seed", e_seed);
  evolve->add_option("--out", e_out)->required();
  evolve_flags.attach(evolve);

  // metrics
  auto* metrics = app.add_subcommand("metrics", "dataset analysis");
  metrics->require_subcommand(1);
  auto* mu = metrics->add_subcommand("uniformity", "nearest-neighbor distance variance");
  BackendFlags mu_flags;
  std::string mu_in, mu_embedder = "hash", mu_out;
  std::size_t mu_dim = 256;
  mu->add_option("--in", mu_in)->required();
  mu->add_option("--embedder", mu_embedder, "hash or http");
  mu->add_option("--dim", mu_dim, "hashing embedder dimension");
  mu->add_option("--out", mu_out, "write the result JSON here");
  mu_flags.attach(mu);

  auto* ma = metrics->add_subcommand("ambiguity", "instruction uncertainty vs prediction probability");
  BackendFlags ma_flags;
  std::string ma_in, ma_scorer = "mock", ma_perturber = "token-drop", ma_out, ma_points;
  std::size_t ma_k = 5;
  ma->add_option("--in", ma_in)->required();
  ma->add_option("--scorer", ma_scorer, "mock or http");
  ma->add_option("--perturber", ma_perturber, "token-drop or llm");
  ma->add_option("--k", ma_k, "perturbations per sample");
  ma->add_option("--out", ma_out, "write the report JSON here");
  ma->add_option("--points", ma_points, "write the two-column point set TSV here");
  ma_flags.attach(ma);

  auto* me = metrics->add_subcommand("export-embeddings", "write id + vector rows for projection");
  BackendFlags me_flags;
  std::string me_in, me_out, me_embedder = "hash";
  std::size_t me_dim = 256;
  me->add_option("--in", me_in)->required();
  me->add_option("--out", me_out)->required();
  me->add_option("--embedder", me_embedder, "hash or http");
  me->add_option("--dim", me_dim, "hashing embedder dimension");
  me_flags.attach(me);

  // run
  auto* run = app.add_subcommand("run", "full pipeline: partition, split, fuse, collect, dedup, metrics, report");
  std::string r_config;
  run->add_option("--config", r_config)->required();

  // report
  auto* report = app.add_subcommand("report", "render a stats JSON as a text report");
  std::string rp_stats, rp_out;
  report->add_option("--stats", rp_stats)->required();
  report->add_option("--out", rp_out, "write the rendered text here");

  // estimate-cost
  auto* est = app.add_subcommand("estimate-cost", "linear cost model for a planned run");
  BackendFlags est_flags;
  std::size_t ec_requests = 0;
  double ec_avg_in = 0.0, ec_avg_out = 0.0, ec_price_in = 0.0, ec_price_out = 0.0;
  est->add_option("--requests", ec_requests)->required();
  est->add_option("--avg-in", ec_avg_in)->required();
  est->add_option("--avg-out", ec_avg_out)->required();
  est->add_option("--price-in", ec_price_in, "USD per 1k input tokens (overrides config)");
  est->add_option("--price-out", ec_price_out, "USD per 1k output tokens (overrides config)");
  est_flags.attach(est, /*with_backend=*/true);  // supplies --model and --config

  CLI11_PARSE(app, argc, argv);

  try {
    if (*partition) return cmd_partition(p_in, p_out_py, p_out_non, p_decisions);
    if (*split) return cmd_split(s_in, s_k, s_seed, s_out_sel, s_out_rest);
    if (*dd) return cmd_dedup(d_in, d_out);
    if (*stats) return cmd_stats(st_in, st_tok, st_out);
    if (*fuse) {
      return cmd_fuse(fuse_flags, f_seeds, f_count, f_seed, f_out, f_resume, f_allow_repeat,
                      f_no_dedup, f_stop_after);
    }
    if (*collect) return cmd_collect(collect_flags, c_in, c_out, c_resume);
    if (*evolve) return cmd_evolve(evolve_flags, e_seeds, e_rounds, e_heuristics, e_seed, e_out);
    if (*mu) return cmd_metrics_uniformity(mu_flags, mu_in, mu_embedder, mu_dim, mu_out);
    if (*ma) {
      return cmd_metrics_ambiguity(ma_flags, ma_in, ma_scorer, ma_perturber, ma_k, ma_out,
                                   ma_points);
    }
    if (*me) return cmd_metrics_export(me_flags, me_in, me_out, me_embedder, me_dim);
    if (*run) return cmd_run(r_config);
    if (*report) return cmd_report(rp_stats, rp_out);
    if (*est) {
      return cmd_estimate_cost(est_flags, ec_requests, ec_avg_in, ec_avg_out, est_flags.model,
                               ec_price_in, ec_price_out);
    }
    std::cerr << "error: no subcommand\n";
    return kExitConfig;
  } catch (const iftk::SpendCapError& e) {
    std::cerr << "spend cap: " << e.what() << "\n";
    return kExitSpendCap;
  } catch (const iftk::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const iftk::BackendError& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return kExitBackend;
  } catch (const iftk::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
