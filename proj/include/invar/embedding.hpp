// Embedding providers and storage. Three providers share one interface: a
// deterministic synthetic provider (text hash seeds a gaussian draw), a
// planted provider for fixtures (registered texts embed near an anchor text's
// vector), and a remote HTTP provider. All outputs are unit vectors; matrices
// are immutable after build; top-k search is exhaustive and exact.
#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "invar/common.hpp"
#include "invar/corpus.hpp"

namespace invar {

struct Embedding {
  std::vector<double> values;

  std::size_t dim() const { return values.size(); }
};

double dot(const Embedding& a, const Embedding& b);

// Scales to unit norm; ZeroVector when the input norm is below 1e-12.
void normalize_in_place(Embedding& v);

enum class ProviderKind { Synthetic, Planted, Remote };

struct ProviderSpec {
  ProviderKind kind = ProviderKind::Synthetic;
  std::uint64_t seed = 0;
  std::size_t dim = 0;
  std::string endpoint;  // remote only
  double noise = 0.0;    // planted only
};

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::size_t dim() const = 0;
  virtual Embedding embed(const std::string& text) const = 0;
  virtual std::vector<Embedding> embed_batch(
      const std::vector<std::string>& texts) const;
};

// Pipeline, frozen by a golden test: h = fnv1a64(text) XOR seed; stream =
// splitmix64(h); draw ceil(dim/2) Box-Muller pairs; truncate to dim;
// normalize. A near-zero draw redraws from h+1, at most 3 times.
class SyntheticProvider : public EmbeddingProvider {
 public:
  SyntheticProvider(std::uint64_t seed, std::size_t dim);
  std::size_t dim() const override { return dim_; }
  Embedding embed(const std::string& text) const override;

  // Pre-normalization gaussian draw; the planted provider composes these.
  Embedding raw(const std::string& text) const;

 private:
  std::uint64_t seed_;
  std::size_t dim_;
};

// Registered texts embed as normalize(synthetic(anchor) + noise *
// synthetic(text)); unregistered texts fall through to the synthetic path.
// Plant all pairs before concurrent use; reads are lock-free.
class PlantedProvider : public EmbeddingProvider {
 public:
  PlantedProvider(std::uint64_t seed, std::size_t dim, double noise);
  std::size_t dim() const override { return base_.dim(); }
  void plant(const std::string& text, const std::string& anchor);
  Embedding embed(const std::string& text) const override;

 private:
  SyntheticProvider base_;
  double noise_;
  std::unordered_map<std::string, std::string> anchors_;
};

// POSTs {"texts": [...], "dim": D} and expects {"embeddings": [[...], ...]};
// vectors are re-normalized client-side no matter what the server returns.
class RemoteEmbeddingProvider : public EmbeddingProvider {
 public:
  RemoteEmbeddingProvider(std::string endpoint, std::size_t dim);
  std::size_t dim() const override { return dim_; }
  Embedding embed(const std::string& text) const override;
  std::vector<Embedding> embed_batch(
      const std::vector<std::string>& texts) const override;

 private:
  std::string endpoint_;
  std::size_t dim_;
};

std::unique_ptr<EmbeddingProvider> make_provider(const ProviderSpec& spec);

Embedding embed_text(const ProviderSpec& spec, const std::string& text);

struct EmbeddingMatrix {
  std::vector<Embedding> rows;  // indexed by chunk_id
  std::string provider_tag;
  std::string corpus_label;
  std::size_t dim = 0;

  std::size_t size() const { return rows.size(); }
  const Embedding& row(ChunkId id) const;
};

// One row per chunk; fan-out across jobs writes disjoint slots, so the result
// is independent of the worker count. Remote providers are batched instead.
EmbeddingMatrix embed_corpus(const EmbeddingProvider& provider,
                             const Corpus& corpus,
                             const std::string& provider_tag,
                             unsigned jobs = 0);

// Binary layout: "IVEM", u32 version=1, u32 dim, u64 n, then n*dim f64
// little-endian in chunk_id order; sidecar <path>.json carries provider_tag
// and corpus_label.
void save_matrix(const EmbeddingMatrix& matrix, const std::string& path);
EmbeddingMatrix load_matrix(const std::string& path);

// Exhaustive scan; k highest dot products, score descending, ties by
// ascending chunk_id; all n when k >= n.
std::vector<std::pair<ChunkId, double>> top_k(const Embedding& query,
                                              const EmbeddingMatrix& matrix,
                                              std::size_t k);

}  // namespace invar
