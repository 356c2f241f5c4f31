#pragma once

#include <cctype>
#include <cstdio>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "iftk/errors.hpp"
#include "iftk/util.hpp"

namespace iftk {

/// Counts tokens in a text. Implementations must be deterministic.
class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::size_t count(std::string_view text) const = 0;
  virtual std::string id() const = 0;
};

/// Deterministic built-in tokenizer: a token is either a maximal run of
/// word characters [A-Za-z0-9_] or a single non-space punctuation character.
///   "Hello, World!" -> {"Hello", ",", "World", "!"} -> 4 tokens.
class BuiltinTokenizer final : public Tokenizer {
 public:
  static bool is_word_char(unsigned char c) {
    return std::isalnum(c) != 0 || c == '_';
  }

  static std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
      const unsigned char c = static_cast<unsigned char>(text[i]);
      if (std::isspace(c)) {
        ++i;
        continue;
      }
      if (is_word_char(c)) {
        std::size_t j = i;
        while (j < text.size() && is_word_char(static_cast<unsigned char>(text[j]))) ++j;
        out.emplace_back(text.substr(i, j - i));
        i = j;
      } else {
        out.emplace_back(text.substr(i, 1));
        ++i;
      }
    }
    return out;
  }

  std::size_t count(std::string_view text) const override {
    std::size_t n = 0;
    std::size_t i = 0;
    while (i < text.size()) {
      const unsigned char c = static_cast<unsigned char>(text[i]);
      if (std::isspace(c)) {
        ++i;
        continue;
      }
      if (is_word_char(c)) {
        while (i < text.size() && is_word_char(static_cast<unsigned char>(text[i]))) ++i;
      } else {
        ++i;
      }
      ++n;
    }
    return n;
  }

  /// Prefix of `text` containing at most `max_tokens` tokens.
  static std::string truncate(std::string_view text, std::size_t max_tokens) {
    std::size_t n = 0;
    std::size_t i = 0;
    while (i < text.size() && n < max_tokens) {
      const unsigned char c = static_cast<unsigned char>(text[i]);
      if (std::isspace(c)) {
        ++i;
        continue;
      }
      if (is_word_char(c)) {
        while (i < text.size() && is_word_char(static_cast<unsigned char>(text[i]))) ++i;
      } else {
        ++i;
      }
      ++n;
    }
    return std::string(text.substr(0, i));
  }

  std::string id() const override { return "builtin"; }
};

/// Bridges to an external tokenizer over a line-oriented subprocess protocol:
/// one text per line on stdin (newlines and backslashes escaped as \n and \\),
/// one decimal token count per line on stdout. The child runs for the lifetime
/// of this object.
class SubprocessTokenizer final : public Tokenizer {
 public:
  explicit SubprocessTokenizer(std::string command) : command_(std::move(command)) {
    int to_child[2];
    int from_child[2];
    if (pipe(to_child) != 0 || pipe(from_child) != 0) {
      throw Error("SubprocessTokenizer: pipe() failed");
    }
    pid_ = fork();
    if (pid_ < 0) throw Error("SubprocessTokenizer: fork() failed");
    if (pid_ == 0) {
      dup2(to_child[0], STDIN_FILENO);
      dup2(from_child[1], STDOUT_FILENO);
      close(to_child[0]);
      close(to_child[1]);
      close(from_child[0]);
      close(from_child[1]);
      execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
      _exit(127);
    }
    close(to_child[0]);
    close(from_child[1]);
    in_ = fdopen(to_child[1], "w");
    out_ = fdopen(from_child[0], "r");
    if (!in_ || !out_) throw Error("SubprocessTokenizer: fdopen() failed");
  }

  ~SubprocessTokenizer() override {
    if (in_) fclose(in_);
    if (out_) fclose(out_);
    if (pid_ > 0) {
      int status = 0;
      waitpid(pid_, &status, 0);
    }
  }

  SubprocessTokenizer(const SubprocessTokenizer&) = delete;
  SubprocessTokenizer& operator=(const SubprocessTokenizer&) = delete;

  std::size_t count(std::string_view text) const override {
    std::string line;
    line.reserve(text.size() + 1);
    for (char c : text) {
      if (c == '\\') {
        line += "\\\\";
      } else if (c == '\n') {
        line += "\\n";
      } else {
        line.push_back(c);
      }
    }
    line.push_back('\n');
    if (fwrite(line.data(), 1, line.size(), in_) != line.size() || fflush(in_) != 0) {
      throw Error("SubprocessTokenizer: write to tokenizer process failed");
    }
    char buf[64];
    if (!fgets(buf, sizeof(buf), out_)) {
      throw Error("SubprocessTokenizer: tokenizer process produced no output");
    }
    char* end = nullptr;
    const long long v = std::strtoll(buf, &end, 10);
    if (end == buf || v < 0) {
      throw Error(std::string("SubprocessTokenizer: bad count line: ") + buf);
    }
    return static_cast<std::size_t>(v);
  }

  std::string id() const override { return "cmd:" + command_; }

 private:
  std::string command_;
  pid_t pid_ = -1;
  FILE* in_ = nullptr;
  FILE* out_ = nullptr;
};

/// Parses a tokenizer spec: "builtin" or "cmd:<shell command>".
inline std::unique_ptr<Tokenizer> make_tokenizer(const std::string& spec) {
  if (spec.empty() || spec == "builtin") return std::make_unique<BuiltinTokenizer>();
  if (spec.rfind("cmd:", 0) == 0) return std::make_unique<SubprocessTokenizer>(spec.substr(4));
  throw ConfigError("unknown tokenizer spec: " + spec);
}

}  // namespace iftk
