#pragma once

#include <cstdlib>
#include <map>
#include <optional>
#include <set>
#include <string>

#include "iftk/backend.hpp"
#include "iftk/errors.hpp"
#include "iftk/util.hpp"

namespace iftk {

/// Flat `key = value` config file; `#` starts a comment. Later keys win.
/// Dotted keys form sections (backend.kind, prices.<model>.input_per_1k).
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse_text(const std::string& text, const std::string& origin = "<text>") {
    KeyValueConfig cfg;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
      std::size_t end = text.find('\n', start);
      if (end == std::string::npos) end = text.size();
      ++line_no;
      std::string line = text.substr(start, end - start);
      start = end + 1;
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const std::size_t eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + " line " + std::to_string(line_no) + ": expected key = value");
      }
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty()) {
        throw ConfigError(origin + " line " + std::to_string(line_no) + ": empty key");
      }
      cfg.values_[key] = value;
      if (start > text.size()) break;
    }
    return cfg;
  }

  static KeyValueConfig parse_file(const std::filesystem::path& path) {
    return parse_text(read_file(path), path.string());
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get(const std::string& key, const std::string& fallback = {}) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    char* end = nullptr;
    const double v = std::strtod(it->second.c_str(), &end);
    if (end == it->second.c_str() || *end != '\0') {
      throw ConfigError("config key " + key + ": not a number: " + it->second);
    }
    return v;
  }

  std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    char* end = nullptr;
    const long long v = std::strtoll(it->second.c_str(), &end, 10);
    if (end == it->second.c_str() || *end != '\0') {
      throw ConfigError("config key " + key + ": not an integer: " + it->second);
    }
    return v;
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string v = to_lower_ascii(it->second);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config key " + key + ": not a boolean: " + it->second);
  }

  /// All prices.<model>.{input_per_1k,output_per_1k} entries.
  PriceTable price_table() const {
    PriceTable t;
    std::map<std::string, ModelPrice> partial;
    for (const auto& [key, value] : values_) {
      if (key.rfind("prices.", 0) != 0) continue;
      const std::string rest = key.substr(7);
      const std::size_t dot = rest.rfind('.');
      if (dot == std::string::npos) throw ConfigError("malformed price key: " + key);
      const std::string model = rest.substr(0, dot);
      const std::string field = rest.substr(dot + 1);
      char* end = nullptr;
      const double v = std::strtod(value.c_str(), &end);
      if (end == value.c_str() || *end != '\0' || v < 0) {
        throw ConfigError("config key " + key + ": not a valid price: " + value);
      }
      if (field == "input_per_1k") {
        partial[model].input_per_1k = v;
      } else if (field == "output_per_1k") {
        partial[model].output_per_1k = v;
      } else {
        throw ConfigError("unknown price field in " + key);
      }
    }
    for (const auto& [model, price] : partial) t.set(model, price);
    return t;
  }

  /// Stable hash over the sorted key-value pairs; used to refuse resuming a
  /// job whose configuration changed. Keys in `exclude` do not contribute
  /// (guardrails that never influence outputs, e.g. the spend cap).
  std::string hash(const std::set<std::string>& exclude = {}) const {
    std::string blob;
    for (const auto& [k, v] : values_) {
      if (exclude.count(k)) continue;
      blob += k + "\x1f" + v + "\x1e";
    }
    return content_hash_hex(blob);
  }

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace iftk
