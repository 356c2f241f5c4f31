#include <doctest.h>

#include <algorithm>
#include <set>

#include "iftk/corpus.hpp"
#include "test_helpers.hpp"

using namespace iftk;
using testutil::TempDir;
using testutil::write_text;

TEST_CASE("load_corpus: identity ingest of three instructions") {
  TempDir tmp("corpus");
  const auto path = write_text(tmp / "in.jsonl",
                               R"({"instruction":"a"})"
                               "\n"
                               R"({"instruction":"b"})"
                               "\n"
                               R"({"instruction":"c"})"
                               "\n");
  Corpus c = load_corpus(path);
  REQUIRE(c.size() == 3);
  CHECK(c.samples[0].instruction == "a");
  CHECK(c.samples[1].instruction == "b");
  CHECK(c.samples[2].instruction == "c");
  for (const auto& s : c.samples) {
    CHECK(s.origin == Origin::seed);
    CHECK(s.round == 0);
    CHECK(s.language == Language::unknown);
    CHECK(s.response.empty());
    CHECK(!s.id.empty());
  }
}

TEST_CASE("load_corpus: missing instruction carries the line number") {
  TempDir tmp("corpus");
  const auto path = write_text(tmp / "in.jsonl",
                               R"({"instruction":"a"})"
                               "\n"
                               R"({"response":"only"})"
                               "\n");
  CHECK_THROWS_WITH_AS(load_corpus(path), "line 2: missing instruction", CorpusError);
}

TEST_CASE("load_corpus: malformed JSON names the line") {
  TempDir tmp("corpus");
  const auto path = write_text(tmp / "in.jsonl", "{\"instruction\":\"a\"}\nnot json\n");
  try {
    load_corpus(path);
    FAIL("expected CorpusError");
  } catch (const CorpusError& e) {
    CHECK(std::string(e.what()).rfind("line 2:", 0) == 0);
  }
}

TEST_CASE("load_corpus: duplicate explicit id is rejected by name") {
  TempDir tmp("corpus");
  const auto path = write_text(tmp / "in.jsonl",
                               R"({"id":"x1","instruction":"a"})"
                               "\n"
                               R"({"id":"x1","instruction":"b"})"
                               "\n");
  try {
    load_corpus(path);
    FAIL("expected CorpusError");
  } catch (const CorpusError& e) {
    CHECK(std::string(e.what()).find("x1") != std::string::npos);
  }
}

TEST_CASE("load_corpus: fused record with absent parents names the dangling id") {
  TempDir tmp("corpus");
  const auto path = write_text(
      tmp / "in.jsonl",
      R"({"id":"c1","instruction":"child","origin":"fused","parents":["gone-1","gone-2"]})"
      "\n");
  try {
    load_corpus(path);
    FAIL("expected CorpusError");
  } catch (const CorpusError& e) {
    CHECK(std::string(e.what()).find("gone-1") != std::string::npos);
  }
  // The same file loads when the parents resolve in a declared ancestor set.
  std::unordered_set<std::string> ancestors = {"gone-1", "gone-2"};
  Corpus c = load_corpus(path, &ancestors);
  CHECK(c.size() == 1);
}

TEST_CASE("load_corpus: lineage arity invariants enforced") {
  TempDir tmp("corpus");
  const auto path = write_text(tmp / "in.jsonl",
                               R"({"instruction":"x","origin":"fused","parents":["a"]})"
                               "\n");
  CHECK_THROWS_AS(load_corpus(path), CorpusError);
}

TEST_CASE("save/load round-trip preserves unknown fields and identical content gets distinct ids") {
  TempDir tmp("corpus");
  const auto path = write_text(tmp / "in.jsonl",
                               R"({"instruction":"same","custom_tag":42})"
                               "\n"
                               R"({"instruction":"same","custom_tag":43})"
                               "\n");
  Corpus c = load_corpus(path);
  REQUIRE(c.size() == 2);
  CHECK(c.samples[0].id != c.samples[1].id);
  CHECK(c.samples[0].extra["custom_tag"] == 42);

  const auto out = tmp / "out.jsonl";
  save_corpus(c, out);
  Corpus c2 = load_corpus(out);
  REQUIRE(c2.size() == 2);
  CHECK(c2.samples[0].extra["custom_tag"] == 42);
  CHECK(c2.samples[1].extra["custom_tag"] == 43);
  CHECK(c2.samples[0].id == c.samples[0].id);
}

TEST_CASE("partition_by_language: keyword-forced two-sample case") {
  Corpus c;
  Sample a;
  a.id = "s1";
  a.instruction = "Write a Python function that lowercases a string.";
  Sample b;
  b.id = "s2";
  b.instruction = "Write a Java class that lowercases a string.";
  c.samples = {a, b};
  PartitionResult r = partition_by_language(c);
  REQUIRE(r.python.size() == 1);
  REQUIRE(r.non_python.size() == 1);
  CHECK(r.python.samples[0].id == "s1");
  CHECK(r.non_python.samples[0].id == "s2");
}

TEST_CASE("partition_by_language: 20-sample fixture matches hand labels") {
  Corpus c = load_corpus(testutil::data_dir() / "language20.jsonl");
  REQUIRE(c.size() == 20);
  PartitionResult r = partition_by_language(c);
  CHECK(r.python.size() + r.non_python.size() == 20);
  // The fixture carries the hand-assigned side in an `expect` field.
  for (const auto& s : r.python.samples) {
    CHECK(s.extra.value("expect", std::string()) == "python");
  }
  for (const auto& s : r.non_python.samples) {
    CHECK(s.extra.value("expect", std::string()) == "non_python");
  }
  // Disjoint and exhaustive over ids.
  std::set<std::string> ids;
  for (const auto& s : r.python.samples) ids.insert(s.id);
  for (const auto& s : r.non_python.samples) ids.insert(s.id);
  CHECK(ids.size() == 20);
}

TEST_CASE("partition: explicit language field wins over text cues") {
  Corpus c;
  Sample s;
  s.id = "s1";
  s.instruction = "Write a Python function.";  // text says python
  s.language = Language::non_python;           // field says otherwise
  s.language_label = "java";
  c.samples = {s};
  PartitionResult r = partition_by_language(c);
  CHECK(r.non_python.size() == 1);
  CHECK(r.python.empty());
}

TEST_CASE("free-form language labels round-trip through JSONL") {
  TempDir tmp("corpus");
  const auto path = write_text(tmp / "in.jsonl",
                               R"({"instruction":"x","language":"java"})"
                               "\n"
                               R"({"instruction":"y","language":"PYTHON"})"
                               "\n"
                               R"({"instruction":"z"})"
                               "\n");
  Corpus c = load_corpus(path);
  CHECK(c.samples[0].language == Language::non_python);
  CHECK(c.samples[0].language_label == "java");
  CHECK(c.samples[1].language == Language::python);
  CHECK(c.samples[2].language == Language::unknown);

  const auto out = tmp / "out.jsonl";
  save_corpus(c, out);
  Corpus back = load_corpus(out);
  CHECK(back.samples[0].language_label == "java");
  CHECK(back.samples[1].language == Language::python);
  CHECK(back.samples[2].language == Language::unknown);
  // The unknown case omits the field entirely.
  CHECK(read_file(out).find("\"language\":\"java\"") != std::string::npos);
}

TEST_CASE("partition: field_override classifier ignores text cues") {
  Corpus c;
  Sample cued;
  cued.id = "s1";
  cued.instruction = "Write a Python function.";  // cue present, field unset
  Sample labeled;
  labeled.id = "s2";
  labeled.instruction = "Anything at all.";
  labeled.language = Language::python;
  c.samples = {cued, labeled};
  PartitionResult r = partition_by_language(c, Classifier::field_override);
  REQUIRE(r.python.size() == 1);
  CHECK(r.python.samples[0].id == "s2");
  CHECK(r.non_python.samples[0].id == "s1");
}

TEST_CASE("PartitionSpec: partition-then-split construction") {
  Corpus c = load_corpus(testutil::data_dir() / "language20.jsonl");
  PartitionSpec spec;
  spec.split_size = 6;
  spec.rng_seed = 17;
  PartitionSpec::Outcome out = spec.apply(c);
  CHECK(out.python.size() == 10);
  CHECK(out.non_python.size() == 10);
  CHECK(out.selected.size() == 6);
  CHECK(out.rest.size() == 4);
  // Deterministic under the same spec.
  PartitionSpec::Outcome again = spec.apply(c);
  for (std::size_t i = 0; i < out.selected.size(); ++i) {
    CHECK(out.selected.samples[i].id == again.selected.samples[i].id);
  }

  PartitionSpec too_big;
  too_big.split_size = 21;
  CHECK_THROWS_AS(too_big.apply(c), CorpusError);
  PartitionSpec over_python;
  over_python.split_size = 15;  // fits the corpus but not its python side
  CHECK_THROWS_AS(over_python.apply(c), CorpusError);
}

TEST_CASE("sample_token_counts recomputes on demand") {
  BuiltinTokenizer tok;
  Sample s;
  s.id = "t";
  s.instruction = "one two three";
  s.response = "a, b";
  const TokenCounts counts = sample_token_counts(s, tok);
  CHECK(counts.instruction_tokens == 3);
  CHECK(counts.response_tokens == 3);  // {"a", ",", "b"}
}

static Corpus numbered_corpus(std::size_t n) {
  Corpus c;
  c.name = "numbered";
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.id = "n" + std::to_string(i);
    s.instruction = "task number " + std::to_string(i);
    c.samples.push_back(std::move(s));
  }
  return c;
}

TEST_CASE("split_random: edges and determinism") {
  Corpus c = numbered_corpus(10);

  auto [sel0, rest0] = split_random(c, 0, 1);
  CHECK(sel0.empty());
  CHECK(rest0.size() == 10);

  auto [selN, restN] = split_random(c, 10, 1);
  CHECK(selN.size() == 10);
  CHECK(restN.empty());

  auto [a1, b1] = split_random(c, 3, 42);
  auto [a2, b2] = split_random(c, 3, 42);
  REQUIRE(a1.size() == 3);
  for (std::size_t i = 0; i < a1.size(); ++i) CHECK(a1.samples[i].id == a2.samples[i].id);
  for (std::size_t i = 0; i < b1.size(); ++i) CHECK(b1.samples[i].id == b2.samples[i].id);

  // Multiset equality on ids: selected + rest == input exactly.
  std::multiset<std::string> all;
  for (const auto& s : a1.samples) all.insert(s.id);
  for (const auto& s : b1.samples) all.insert(s.id);
  std::multiset<std::string> orig;
  for (const auto& s : c.samples) orig.insert(s.id);
  CHECK(all == orig);

  CHECK_THROWS_AS(split_random(c, 11, 1), CorpusError);
}

TEST_CASE("split_random: different seeds usually differ") {
  Corpus c = numbered_corpus(100);
  auto [a, _] = split_random(c, 50, 1);
  auto [b, __] = split_random(c, 50, 2);
  std::set<std::string> ia, ib;
  for (const auto& s : a.samples) ia.insert(s.id);
  for (const auto& s : b.samples) ib.insert(s.id);
  CHECK(ia != ib);
}

TEST_CASE("dedup: normalization-forced and identity cases") {
  Corpus c;
  for (const auto& text : {"A", "a ", "B"}) {
    Sample s;
    s.id = "id-" + std::string(text);
    s.instruction = text;
    c.samples.push_back(std::move(s));
  }
  Corpus d = dedup(c);
  REQUIRE(d.size() == 2);
  CHECK(d.samples[0].instruction == "A");  // first occurrence wins
  CHECK(d.samples[1].instruction == "B");

  Corpus no_dups = numbered_corpus(5);
  Corpus d2 = dedup(no_dups);
  REQUIRE(d2.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) CHECK(d2.samples[i].id == no_dups.samples[i].id);
}

TEST_CASE("dedup: 100-sample fixture with 10 planted duplicates vs brute-force oracle") {
  Corpus c;
  Rng rng(99);
  for (std::size_t i = 0; i < 90; ++i) {
    Sample s;
    s.id = "u" + std::to_string(i);
    s.instruction = "unique task " + std::to_string(i) + " variant " +
                    std::to_string(rng.next_u64() % 1000000);
    c.samples.push_back(std::move(s));
  }
  // Plant 10 duplicates of existing samples with whitespace/case variations.
  for (std::size_t i = 0; i < 10; ++i) {
    Sample dup = c.samples[i * 7];
    dup.id = "dup" + std::to_string(i);
    dup.instruction = "  " + to_lower_ascii(dup.instruction) + "   ";
    const std::size_t pos = (i * 13) % c.samples.size();
    c.samples.insert(c.samples.begin() + static_cast<std::ptrdiff_t>(pos), dup);
  }
  REQUIRE(c.size() == 100);

  Corpus d = dedup(c);

  // Brute-force oracle: pairwise comparison, first occurrence survives.
  std::vector<const Sample*> survivors;
  for (const auto& s : c.samples) {
    bool dup_of_earlier = false;
    for (const Sample* t : survivors) {
      if (normalize_text(t->instruction) == normalize_text(s.instruction)) {
        dup_of_earlier = true;
        break;
      }
    }
    if (!dup_of_earlier) survivors.push_back(&s);
  }
  REQUIRE(survivors.size() == 90);
  REQUIRE(d.size() == 90);
  for (std::size_t i = 0; i < 90; ++i) CHECK(d.samples[i].id == survivors[i]->id);

  // Idempotence.
  Corpus dd = dedup(d);
  REQUIRE(dd.size() == d.size());
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(dd.samples[i].id == d.samples[i].id);
}

TEST_CASE("token_stats: exact means") {
  BuiltinTokenizer tok;
  Corpus c;
  Sample a;
  a.id = "a";
  a.instruction = "one two three four";        // 4 tokens
  a.response = "r1 r2";                        // 2 tokens
  Sample b;
  b.id = "b";
  b.instruction = "one two three four five six";  // 6 tokens
  b.response = "r1 r2 r3 r4";                     // 4 tokens
  c.samples = {a, b};
  TokenStatsReport r = token_stats(c, tok);
  CHECK(r.n_samples == 2);
  CHECK(r.instruction_mean_tokens == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(r.response_mean_tokens == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(r.tokenizer_id == "builtin");
}

TEST_CASE("token_stats: empty corpus") {
  BuiltinTokenizer tok;
  Corpus c;
  TokenStatsReport r = token_stats(c, tok);
  CHECK(r.n_samples == 0);
  CHECK(r.instruction_mean_tokens == 0.0);
}

TEST_CASE("token_stats: bundled fixture matches hand-computed means exactly") {
  // tokens20.jsonl: sample i (1..20) has i instruction words and 2i response
  // words, all plain words. Hand sums: 210 and 420; means 10.5 and 21.0.
  Corpus c = load_corpus(testutil::data_dir() / "tokens20.jsonl");
  REQUIRE(c.size() == 20);
  BuiltinTokenizer tok;
  TokenStatsReport r = token_stats(c, tok);
  CHECK(r.instruction_mean_tokens == 10.5);
  CHECK(r.response_mean_tokens == 21.0);

  // Brute-force recomputation within 1e-9.
  double inst = 0.0, resp = 0.0;
  for (const auto& s : c.samples) {
    inst += static_cast<double>(tok.count(s.instruction));
    resp += static_cast<double>(tok.count(s.response));
  }
  CHECK(std::abs(r.instruction_mean_tokens - inst / 20.0) < 1e-9);
  CHECK(std::abs(r.response_mean_tokens - resp / 20.0) < 1e-9);
}

TEST_CASE("check_integrity passes after every corpus operation") {
  Corpus c = load_corpus(testutil::data_dir() / "language20.jsonl");
  PartitionResult part = partition_by_language(c);
  CHECK_NOTHROW(check_integrity(part.python));
  CHECK_NOTHROW(check_integrity(part.non_python));
  auto [sel, rest] = split_random(c, 7, 5);
  CHECK_NOTHROW(check_integrity(sel));
  CHECK_NOTHROW(check_integrity(rest));
  CHECK_NOTHROW(check_integrity(dedup(c)));
}
