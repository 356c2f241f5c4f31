#pragma once

#include <filesystem>
#include <mutex>
#include <optional>
#include <string>

#include <json.hpp>

#include "iftk/backend.hpp"
#include "iftk/errors.hpp"
#include "iftk/util.hpp"

namespace iftk {

/// Append-only content-addressed store: one file per request hash holding the
/// serialized request and its result. Existing entries are never rewritten.
class RequestCache {
 public:
  explicit RequestCache(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  std::optional<BackendResult> find(const std::string& request_hash) const {
    const auto path = entry_path(request_hash);
    if (!std::filesystem::exists(path)) return std::nullopt;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
      throw Error("corrupt cache entry " + path.string() + ": " + e.what());
    }
    return BackendResult::from_json(j.at("result"));
  }

  void store(const BackendRequest& req, const BackendResult& res) {
    const auto path = entry_path(req.content_hash());
    std::lock_guard<std::mutex> lock(mu_);
    if (std::filesystem::exists(path)) return;  // append-only
    nlohmann::json j{{"schema_version", 1}, {"request", req.to_json()}, {"result", res.to_json()}};
    write_file_atomic(path, j.dump(2) + "\n");
  }

  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path entry_path(const std::string& hash) const {
    return dir_ / (hash + ".json");
  }

  std::filesystem::path dir_;
  std::mutex mu_;
};

/// Wraps a completion backend with the cache. A hit returns source=cache with
/// zero added cost and never touches the inner backend. In replay mode a miss
/// is an error, which guarantees fully offline runs.
class CachingBackend final : public CompletionBackend {
 public:
  enum class Mode { read_write, replay };

  CachingBackend(CompletionBackend& inner, RequestCache& cache, Mode mode = Mode::read_write)
      : inner_(inner), cache_(cache), mode_(mode) {}

  BackendResult complete(const BackendRequest& req) override {
    req.check();
    const std::string hash = req.content_hash();
    if (auto hit = cache_.find(hash)) {
      hit->source = ResultSource::cache;
      hit->cost_estimate = 0.0;
      return *hit;
    }
    if (mode_ == Mode::replay) {
      throw BackendError("cache replay miss for request " + hash);
    }
    BackendResult res = inner_.complete(req);
    cache_.store(req, res);
    return res;
  }

  std::string id() const override { return "cached(" + inner_.id() + ")"; }

 private:
  CompletionBackend& inner_;
  RequestCache& cache_;
  Mode mode_;
};

}  // namespace iftk
