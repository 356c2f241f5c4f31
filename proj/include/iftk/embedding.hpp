#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "iftk/backend.hpp"
#include "iftk/corpus.hpp"
#include "iftk/errors.hpp"
#include "iftk/util.hpp"

namespace iftk {

/// N x D matrix of per-sample semantic vectors, rows aligned with `ids`.
struct EmbeddingMatrix {
  std::vector<std::string> ids;
  std::size_t dim = 0;
  std::vector<double> data;  // row-major, ids.size() * dim
  std::string provider_id;

  std::size_t rows() const { return ids.size(); }

  const double* row(std::size_t i) const { return data.data() + i * dim; }
  double* row(std::size_t i) { return data.data() + i * dim; }

  void validate() const {
    if (rows() == 0) throw Error("EmbeddingMatrix: empty");
    if (dim == 0 || data.size() != rows() * dim) {
      throw Error("EmbeddingMatrix: shape mismatch");
    }
    for (double v : data) {
      if (!std::isfinite(v)) throw Error("EmbeddingMatrix: non-finite entry");
    }
  }
};

/// Deterministic text embedder: character trigrams and word unigrams, signed
/// feature hashing into `dim` buckets, then L2 normalization. No model, no
/// network; identical text always maps to the identical vector.
class HashingEmbedder final : public EmbeddingBackend {
 public:
  explicit HashingEmbedder(std::size_t dim = 256, std::uint64_t seed = 0x1f2e3d4c)
      : dim_(dim), seed_(seed) {
    if (dim_ == 0) throw ConfigError("HashingEmbedder: dim must be >= 1");
  }

  std::vector<std::vector<double>> embed(const std::vector<std::string>& texts) override {
    std::vector<std::vector<double>> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(embed_one(t));
    return out;
  }

  std::vector<double> embed_one(const std::string& text) const {
    std::vector<double> v(dim_, 0.0);
    const std::string norm = normalize_text(text);
    // Character trigrams.
    if (norm.size() >= 3) {
      for (std::size_t i = 0; i + 3 <= norm.size(); ++i) {
        bump(v, std::string_view(norm).substr(i, 3), 0x03);
      }
    } else if (!norm.empty()) {
      bump(v, norm, 0x03);
    }
    // Word unigrams.
    std::size_t start = 0;
    while (start <= norm.size()) {
      std::size_t end = norm.find(' ', start);
      if (end == std::string::npos) end = norm.size();
      if (end > start) bump(v, std::string_view(norm).substr(start, end - start), 0x01);
      if (end == norm.size()) break;
      start = end + 1;
    }
    l2_normalize(v);
    return v;
  }

  std::string id() const override {
    return "hash:dim=" + std::to_string(dim_) + ",seed=" + std::to_string(seed_);
  }

  std::size_t dim() const { return dim_; }

 private:
  void bump(std::vector<double>& v, std::string_view feature, std::uint64_t space) const {
    const std::uint64_t h = mix64(seed_ ^ space, fnv1a64(feature));
    const std::size_t bucket = static_cast<std::size_t>(h % dim_);
    v[bucket] += (h >> 63) ? 1.0 : -1.0;
  }

  std::size_t dim_;
  std::uint64_t seed_;
};

/// Embeds every instruction of a corpus, preserving order.
inline EmbeddingMatrix embed_corpus(const Corpus& c, EmbeddingBackend& backend) {
  EmbeddingMatrix m;
  m.provider_id = backend.id();
  if (c.empty()) return m;
  std::vector<std::string> texts;
  texts.reserve(c.size());
  for (const auto& s : c.samples) texts.push_back(s.instruction);
  const auto vectors = backend.embed(texts);
  if (vectors.size() != texts.size()) throw BackendError("embedding batch size mismatch");
  m.dim = vectors.front().size();
  m.ids.reserve(c.size());
  m.data.reserve(c.size() * m.dim);
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    if (vectors[i].size() != m.dim) throw BackendError("embedding dimension mismatch across batch");
    m.ids.push_back(c.samples[i].id);
    m.data.insert(m.data.end(), vectors[i].begin(), vectors[i].end());
  }
  m.validate();
  return m;
}

/// Tab-separated export for external projection tooling (t-SNE, UMAP, ...).
/// Header row `id<TAB>v0...v{D-1}`, then one row per sample; values are
/// printed with 17 significant digits so a read-back is exact.
inline void export_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  std::string out = "id";
  for (std::size_t d = 0; d < m.dim; ++d) out += "\tv" + std::to_string(d);
  out.push_back('\n');
  char buf[64];
  for (std::size_t i = 0; i < m.rows(); ++i) {
    out += m.ids[i];
    const double* r = m.row(i);
    for (std::size_t d = 0; d < m.dim; ++d) {
      std::snprintf(buf, sizeof(buf), "%.17g", r[d]);
      out.push_back('\t');
      out += buf;
    }
    out.push_back('\n');
  }
  write_file_atomic(path, out);
}

inline EmbeddingMatrix import_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open embeddings file: " + path.string());
  EmbeddingMatrix m;
  std::string line;
  if (!std::getline(in, line)) throw Error("embeddings file is empty: " + path.string());
  std::size_t dim = 0;
  for (char c : line) {
    if (c == '\t') ++dim;
  }
  m.dim = dim;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t pos = line.find('\t');
    if (pos == std::string::npos) throw Error("malformed embeddings row");
    m.ids.push_back(line.substr(0, pos));
    std::size_t count = 0;
    while (pos != std::string::npos) {
      const std::size_t next = line.find('\t', pos + 1);
      const std::string cell = next == std::string::npos ? line.substr(pos + 1)
                                                         : line.substr(pos + 1, next - pos - 1);
      m.data.push_back(std::strtod(cell.c_str(), nullptr));
      ++count;
      pos = next;
    }
    if (count != m.dim) throw Error("embeddings row has wrong dimension");
  }
  return m;
}

}  // namespace iftk
