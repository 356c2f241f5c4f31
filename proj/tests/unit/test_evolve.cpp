#include <doctest.h>

#include "iftk/evolve.hpp"
#include "iftk/mock_backend.hpp"
#include "test_helpers.hpp"

using namespace iftk;
using testutil::TempDir;
using testutil::write_text;

TEST_CASE("build_evolve_prompt: plain substitution") {
  EvolHeuristic h{"add", "Add one constraint to: <SEED>"};
  CHECK(build_evolve_prompt("print hello", h) == "Add one constraint to: print hello");
}

TEST_CASE("build_evolve_prompt: multi-line seed golden") {
  EvolHeuristic h{"add", "Add one constraint, keeping the task solvable:\n<SEED>"};
  const std::string golden = read_file(testutil::data_dir() / "evolve_prompt_golden.txt");
  CHECK(build_evolve_prompt("line one\nline two\nline three", h) == golden);
}

TEST_CASE("heuristic validation: placeholder must appear exactly once") {
  EvolHeuristic none{"bad", "no placeholder here"};
  CHECK_THROWS_AS(none.check(), ConfigError);
  EvolHeuristic twice{"bad", "<SEED> and <SEED>"};
  CHECK_THROWS_AS(twice.check(), ConfigError);
  EvolHeuristic ok{"good", "wrap <SEED> tightly"};
  CHECK_NOTHROW(ok.check());
}

TEST_CASE("load_heuristics: config errors surface at load time") {
  TempDir tmp("heur");
  const auto bad = write_text(tmp / "bad.json", R"([{"name":"x","template":"missing"}])");
  CHECK_THROWS_AS(load_heuristics(bad), ConfigError);
  const auto empty = write_text(tmp / "empty.json", "[]");
  CHECK_THROWS_AS(load_heuristics(empty), ConfigError);
  const auto good = write_text(tmp / "good.json", R"([{"name":"x","template":"go: <SEED>"}])");
  const auto hs = load_heuristics(good);
  REQUIRE(hs.size() == 1);
  CHECK(hs[0].name == "x");
}

TEST_CASE("default heuristics are valid") {
  for (const auto& h : default_heuristics()) CHECK_NOTHROW(h.check());
}

TEST_CASE("the shipped heuristics config file loads and mirrors the built-in set") {
  const auto shipped = load_heuristics(std::filesystem::path(IFTK_CONFIGS_DIR) / "heuristics.json");
  const auto builtin = default_heuristics();
  REQUIRE(shipped.size() == builtin.size());
  for (std::size_t i = 0; i < shipped.size(); ++i) {
    CHECK(shipped[i].name == builtin[i].name);
    CHECK(shipped[i].prompt_template == builtin[i].prompt_template);
  }
}

TEST_CASE("evolve_round: empty heuristic list is a config error") {
  Corpus c;
  Sample s;
  s.id = "s";
  s.instruction = "x";
  c.samples.push_back(s);
  MockBackend backend;
  CHECK_THROWS_AS(evolve_round(c, {}, backend), ConfigError);
}

namespace {

Corpus one_seed() {
  Corpus c;
  c.name = "seed";
  Sample s;
  s.id = "s0";
  // 14 builtin tokens.
  s.instruction = "Develop a small function that converts every single input string to simple lowercase form";
  c.samples.push_back(s);
  return c;
}

}  // namespace

TEST_CASE("evolve_round: four rounds with a constraint-appending mock grow monotonically") {
  // The mock appends a fixed clause to the whole prompt each round, so the
  // child token count strictly increases round over round.
  MockBackend::Options mo;
  mo.behavior = MockBackend::Behavior::append_suffix;
  mo.suffix =
      "Additionally, the solution must validate its inputs, report errors with helpful "
      "messages, avoid any global state, run in linear time, use constant extra memory, "
      "include unit tests for boundary conditions, document its public interface, and "
      "remain fully deterministic across repeated executions of the same input data set.";
  MockBackend backend(mo);
  std::vector<EvolHeuristic> hs = {{"add", "Rewrite, adding one constraint: <SEED>"}};

  BuiltinTokenizer tok;
  Corpus current = one_seed();
  CHECK(tok.count(current.samples[0].instruction) == 14);

  std::size_t prev_tokens = tok.count(current.samples[0].instruction);
  for (int round = 1; round <= 4; ++round) {
    EvolveOptions opts;
    opts.rng_seed = 42;
    EvolveOutcome out = evolve_round(current, hs, backend, opts);
    REQUIRE(out.children.size() == 1);
    const Sample& child = out.children.samples[0];
    CHECK(child.round == round);
    CHECK(child.origin == Origin::evolved);
    REQUIRE(child.parents.size() == 1);
    CHECK(child.parents[0] == current.samples[0].id);
    const std::size_t tokens = tok.count(child.instruction);
    CHECK(tokens > prev_tokens);
    prev_tokens = tokens;
    current = out.children;
  }
  CHECK(prev_tokens > 14 * 4);  // escalation, not drift
}

TEST_CASE("evolve_round: deterministic across runs and heuristic choice is per-sample") {
  Corpus c;
  for (int i = 0; i < 12; ++i) {
    Sample s;
    s.id = "s" + std::to_string(i);
    s.instruction = "task " + std::to_string(i);
    c.samples.push_back(std::move(s));
  }
  auto hs = default_heuristics();
  MockBackend b1, b2;
  EvolveOptions opts;
  opts.rng_seed = 7;
  EvolveOutcome r1 = evolve_round(c, hs, b1, opts);
  EvolveOutcome r2 = evolve_round(c, hs, b2, opts);
  REQUIRE(r1.children.size() == r2.children.size());
  for (std::size_t i = 0; i < r1.children.size(); ++i) {
    CHECK(sample_to_json(r1.children.samples[i]) == sample_to_json(r2.children.samples[i]));
  }

  EvolveOptions other;
  other.rng_seed = 8;
  MockBackend b3;
  EvolveOutcome r3 = evolve_round(c, hs, b3, other);
  bool any_diff = false;
  for (std::size_t i = 0; i < r1.children.size(); ++i) {
    if (r1.children.samples[i].instruction != r3.children.samples[i].instruction) any_diff = true;
  }
  CHECK(any_diff);  // different seed picks different heuristics somewhere
}

TEST_CASE("evolve_round: lineage chain terminates at a seed") {
  Corpus seeds = one_seed();
  auto hs = default_heuristics();
  MockBackend backend;
  EvolveOptions opts;
  opts.rng_seed = 1;
  EvolveOutcome r1 = evolve_round(seeds, hs, backend, opts);
  EvolveOutcome r2 = evolve_round(r1.children, hs, backend, opts);
  REQUIRE(r2.children.size() == 1);
  const Sample& grandchild = r2.children.samples[0];
  CHECK(grandchild.round == 2);
  // Walk: grandchild -> child -> seed.
  CHECK(grandchild.parents[0] == r1.children.samples[0].id);
  CHECK(r1.children.samples[0].parents[0] == seeds.samples[0].id);
  CHECK(seeds.samples[0].origin == Origin::seed);
}

TEST_CASE("token_growth is exactly the mean of per-child token deltas") {
  BuiltinTokenizer tok;
  Corpus parents;
  Corpus children;
  // parent tokens {2, 4}; child tokens {5, 5} -> deltas {3, 1} -> mean 2.
  for (int i = 0; i < 2; ++i) {
    Sample p;
    p.id = "p" + std::to_string(i);
    p.instruction = i == 0 ? "one two" : "one two three four";
    parents.samples.push_back(p);
    Sample ch;
    ch.id = "c" + std::to_string(i);
    ch.instruction = "one two three four five";
    ch.origin = Origin::evolved;
    ch.parents = {p.id};
    ch.round = 1;
    children.samples.push_back(ch);
  }
  CHECK(token_growth(parents, children, tok) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("evolve_round: per-sample failure flags and continues") {
  Corpus c;
  for (int i = 0; i < 3; ++i) {
    Sample s;
    s.id = "s" + std::to_string(i);
    s.instruction = "task " + std::to_string(i);
    c.samples.push_back(std::move(s));
  }

  class FailOne final : public CompletionBackend {
   public:
    BackendResult complete(const BackendRequest& req) override {
      if (req.user.find("task 1") != std::string::npos) {
        throw BackendError("down", false);
      }
      return inner_.complete(req);
    }
    std::string id() const override { return "fail-one"; }

   private:
    MockBackend inner_;
  };

  FailOne backend;
  EvolveOutcome out = evolve_round(c, default_heuristics(), backend);
  CHECK(out.stats.evolved == 2);
  CHECK(out.stats.failed == 1);
  CHECK(out.children.size() == 2);
}
