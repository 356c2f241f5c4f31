#include <doctest.h>

#include <map>
#include <string>

#include "iftk/util.hpp"

using namespace iftk;

TEST_CASE("normalize_text trims, collapses whitespace, case-folds") {
  CHECK(normalize_text("  Hello   World  ") == "hello world");
  CHECK(normalize_text("A") == "a");
  CHECK(normalize_text("a ") == "a");
  CHECK(normalize_text("\tTabs\nand\r\nnewlines") == "tabs and newlines");
  CHECK(normalize_text("") == "");
  CHECK(normalize_text("   ") == "");
}

TEST_CASE("trim and starts_with_icase") {
  CHECK(trim("  x  ") == "x");
  CHECK(trim("") == "");
  CHECK(starts_with_icase("INVALID PROMPT.", "invalid prompt"));
  CHECK(!starts_with_icase("IN", "invalid"));
}

TEST_CASE("content hash is stable and collision-separated on simple inputs") {
  const std::string h1 = content_hash_hex("alpha");
  CHECK(h1 == content_hash_hex("alpha"));
  CHECK(h1 != content_hash_hex("beta"));
  CHECK(h1.size() == 32);
}

TEST_CASE("Rng::below is unbiased over a small range and deterministic") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng r(7);
  std::map<std::uint64_t, int> counts;
  const int n = 60000;
  for (int i = 0; i < n; ++i) ++counts[r.below(6)];
  for (const auto& [v, c] : counts) {
    CHECK(v < 6);
    // 4 sigma band around n/6 for a binomial(n, 1/6).
    CHECK(c > n / 6 - 4 * 61);
    CHECK(c < n / 6 + 4 * 61);
  }
}

TEST_CASE("Rng::unit stays in [0,1)") {
  Rng r(3);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.unit();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("write_file_atomic round-trips bytes") {
  const auto path = std::filesystem::temp_directory_path() / "iftk_util_test.bin";
  write_file_atomic(path, std::string("a\nb\0c", 5));
  CHECK(read_file(path) == std::string("a\nb\0c", 5));
  std::filesystem::remove(path);
}
