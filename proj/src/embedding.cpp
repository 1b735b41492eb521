#include "invar/embedding.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "invar/remote.hpp"
#include "json.hpp"

namespace invar {

using nlohmann::json;

double dot(const Embedding& a, const Embedding& b) {
  return dot(std::span<const double>(a.values),
             std::span<const double>(b.values));
}

void normalize_in_place(Embedding& v) {
  double n = norm(v.values);
  if (n < 1e-12) throw ZeroVector("norm below 1e-12");
  for (double& x : v.values) x /= n;
}

std::vector<Embedding> EmbeddingProvider::embed_batch(
    const std::vector<std::string>& texts) const {
  std::vector<Embedding> out;
  out.reserve(texts.size());
  for (const std::string& text : texts) out.push_back(embed(text));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic provider
// ---------------------------------------------------------------------------

SyntheticProvider::SyntheticProvider(std::uint64_t seed, std::size_t dim)
    : seed_(seed), dim_(dim) {
  if (dim_ < 2) throw Error("synthetic provider needs dim >= 2");
}

namespace {

Embedding gaussian_draw(std::uint64_t stream_seed, std::size_t dim) {
  SplitMix64 rng(stream_seed);
  Embedding v;
  v.values.reserve(dim + 1);
  std::size_t pairs = (dim + 1) / 2;
  for (std::size_t p = 0; p < pairs; ++p) {
    double z0 = 0, z1 = 0;
    rng.gaussian_pair(z0, z1);
    v.values.push_back(z0);
    v.values.push_back(z1);
  }
  v.values.resize(dim);
  return v;
}

}  // namespace

Embedding SyntheticProvider::raw(const std::string& text) const {
  std::uint64_t h = fnv1a64(text) ^ seed_;
  for (int attempt = 0; attempt <= 3; ++attempt) {
    Embedding v = gaussian_draw(h + static_cast<std::uint64_t>(attempt), dim_);
    if (norm(v.values) >= 1e-12) return v;
  }
  throw ZeroVector("synthetic draw degenerate after 3 redraws");
}

Embedding SyntheticProvider::embed(const std::string& text) const {
  Embedding v = raw(text);
  normalize_in_place(v);
  return v;
}

// ---------------------------------------------------------------------------
// Planted provider
// ---------------------------------------------------------------------------

PlantedProvider::PlantedProvider(std::uint64_t seed, std::size_t dim,
                                 double noise)
    : base_(seed, dim), noise_(noise) {
  if (noise < 0.0) throw Error("planted noise must be non-negative");
}

void PlantedProvider::plant(const std::string& text,
                            const std::string& anchor) {
  anchors_[text] = anchor;
}

Embedding PlantedProvider::embed(const std::string& text) const {
  auto it = anchors_.find(text);
  if (it == anchors_.end()) return base_.embed(text);
  Embedding anchor = base_.embed(it->second);
  // Unit noise direction: `noise_` is the noise-to-anchor magnitude ratio,
  // independent of the embedding dimension.
  Embedding noise = base_.embed(text);
  Embedding out;
  out.values.resize(anchor.dim());
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    out.values[i] = anchor.values[i] + noise_ * noise.values[i];
  }
  normalize_in_place(out);
  return out;
}

// ---------------------------------------------------------------------------
// Remote provider
// ---------------------------------------------------------------------------

RemoteEmbeddingProvider::RemoteEmbeddingProvider(std::string endpoint,
                                                 std::size_t dim)
    : endpoint_(std::move(endpoint)), dim_(dim) {
  if (endpoint_.empty()) throw Error("remote provider needs an endpoint");
}

Embedding RemoteEmbeddingProvider::embed(const std::string& text) const {
  return embed_batch({text}).front();
}

std::vector<Embedding> RemoteEmbeddingProvider::embed_batch(
    const std::vector<std::string>& texts) const {
  json body = {{"texts", texts}, {"dim", dim_}};
  json response = remote::post_json(endpoint_, body);
  if (!response.contains("embeddings") || !response["embeddings"].is_array()) {
    throw RemoteProtocolError("embedding response missing embeddings array");
  }
  const json& rows = response["embeddings"];
  if (rows.size() != texts.size()) {
    throw RemoteProtocolError(
        "embedding batch of " + std::to_string(texts.size()) + " texts got " +
        std::to_string(rows.size()) + " vectors from " + endpoint_);
  }
  std::vector<Embedding> out;
  out.reserve(rows.size());
  for (const json& row : rows) {
    Embedding v;
    v.values.reserve(dim_);
    for (const json& x : row) v.values.push_back(x.get<double>());
    if (v.dim() != dim_) {
      throw RemoteProtocolError("embedding of dim " + std::to_string(v.dim()) +
                                " from " + endpoint_ + ", expected " +
                                std::to_string(dim_));
    }
    normalize_in_place(v);
    out.push_back(std::move(v));
  }
  return out;
}

std::unique_ptr<EmbeddingProvider> make_provider(const ProviderSpec& spec) {
  switch (spec.kind) {
    case ProviderKind::Synthetic:
      return std::make_unique<SyntheticProvider>(spec.seed, spec.dim);
    case ProviderKind::Planted:
      return std::make_unique<PlantedProvider>(spec.seed, spec.dim,
                                               spec.noise);
    case ProviderKind::Remote:
      return std::make_unique<RemoteEmbeddingProvider>(spec.endpoint,
                                                       spec.dim);
  }
  throw Error("unknown provider kind");
}

Embedding embed_text(const ProviderSpec& spec, const std::string& text) {
  return make_provider(spec)->embed(text);
}

// ---------------------------------------------------------------------------
// Matrices
// ---------------------------------------------------------------------------

const Embedding& EmbeddingMatrix::row(ChunkId id) const {
  if (id >= rows.size()) {
    throw Error("matrix has no row for chunk " + std::to_string(id));
  }
  return rows[id];
}

EmbeddingMatrix embed_corpus(const EmbeddingProvider& provider,
                             const Corpus& corpus,
                             const std::string& provider_tag, unsigned jobs) {
  if (corpus.chunks.empty()) throw EmptyCorpus("cannot embed empty corpus");
  EmbeddingMatrix matrix;
  matrix.provider_tag = provider_tag;
  matrix.corpus_label = corpus.label;
  matrix.dim = provider.dim();
  matrix.rows.resize(corpus.chunks.size());

  if (dynamic_cast<const RemoteEmbeddingProvider*>(&provider) != nullptr) {
    // Remote path stays batched; one request per 64 chunks bounds in-flight
    // work while keeping chunk order.
    constexpr std::size_t kBatch = 64;
    for (std::size_t start = 0; start < corpus.chunks.size(); start += kBatch) {
      std::size_t end = std::min(start + kBatch, corpus.chunks.size());
      std::vector<std::string> texts;
      texts.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        texts.push_back(corpus.chunks[i].text);
      }
      std::vector<Embedding> vecs;
      try {
        vecs = provider.embed_batch(texts);
      } catch (const Error& e) {
        throw RemoteProtocolError("chunks " + std::to_string(start) + ".." +
                                  std::to_string(end - 1) + ": " + e.what());
      }
      for (std::size_t i = start; i < end; ++i) {
        matrix.rows[i] = std::move(vecs[i - start]);
      }
    }
    return matrix;
  }

  parallel_for(corpus.chunks.size(), jobs, [&](std::size_t i) {
    try {
      matrix.rows[i] = provider.embed(corpus.chunks[i].text);
    } catch (const Error& e) {
      throw Error("chunk " + std::to_string(corpus.chunks[i].chunk_id) + ": " +
                  e.what());
    }
  });
  return matrix;
}

// ---------------------------------------------------------------------------
// Persistence ("IVEM")
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::string& out, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double x) {
  put_u64(out, std::bit_cast<std::uint64_t>(x));
}

struct ByteReader {
  const std::string& data;
  std::size_t pos = 0;
  const std::string& path;

  void need(std::size_t n) const {
    if (pos + n > data.size()) {
      throw CorruptCheckpoint("truncated file " + path);
    }
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t x = 0;
    for (int i = 0; i < 4; ++i) {
      x |= static_cast<std::uint32_t>(
               static_cast<unsigned char>(data[pos + i]))
           << (8 * i);
    }
    pos += 4;
    return x;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t x = 0;
    for (int i = 0; i < 8; ++i) {
      x |= static_cast<std::uint64_t>(
               static_cast<unsigned char>(data[pos + i]))
           << (8 * i);
    }
    pos += 8;
    return x;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data[pos++]);
  }
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return data;
}

void write_file(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace

void save_matrix(const EmbeddingMatrix& matrix, const std::string& path) {
  std::string data;
  data.reserve(16 + matrix.rows.size() * matrix.dim * 8);
  data += "IVEM";
  put_u32(data, 1);
  put_u32(data, static_cast<std::uint32_t>(matrix.dim));
  put_u64(data, matrix.rows.size());
  for (const Embedding& row : matrix.rows) {
    for (double x : row.values) put_f64(data, x);
  }
  write_file(path, data);
  json sidecar = {{"provider_tag", matrix.provider_tag},
                  {"corpus_label", matrix.corpus_label}};
  write_file(path + ".json", sidecar.dump() + "\n");
}

EmbeddingMatrix load_matrix(const std::string& path) {
  std::string data = read_file(path);
  ByteReader reader{data, 0, path};
  reader.need(4);
  if (data.compare(0, 4, "IVEM") != 0) {
    throw CorruptCheckpoint("bad magic in " + path);
  }
  reader.pos = 4;
  std::uint32_t version = reader.u32();
  if (version != 1) {
    throw CorruptCheckpoint("unsupported matrix version " +
                            std::to_string(version));
  }
  EmbeddingMatrix matrix;
  matrix.dim = reader.u32();
  std::uint64_t n = reader.u64();
  matrix.rows.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    matrix.rows[i].values.resize(matrix.dim);
    for (std::size_t d = 0; d < matrix.dim; ++d) {
      matrix.rows[i].values[d] = reader.f64();
    }
  }
  std::ifstream side(path + ".json");
  if (side) {
    json sidecar = json::parse(side, nullptr, false);
    if (!sidecar.is_discarded()) {
      matrix.provider_tag = sidecar.value("provider_tag", "");
      matrix.corpus_label = sidecar.value("corpus_label", "");
    }
  }
  return matrix;
}

std::vector<std::pair<ChunkId, double>> top_k(const Embedding& query,
                                              const EmbeddingMatrix& matrix,
                                              std::size_t k) {
  if (k == 0) throw Error("top_k needs k >= 1");
  if (matrix.rows.empty()) throw EmptyCorpus("top_k over empty matrix");
  if (query.dim() != matrix.dim) {
    throw DimMismatch("query dim " + std::to_string(query.dim()) +
                      " vs matrix dim " + std::to_string(matrix.dim));
  }
  std::vector<std::pair<ChunkId, double>> scored;
  scored.reserve(matrix.rows.size());
  for (std::size_t i = 0; i < matrix.rows.size(); ++i) {
    scored.emplace_back(static_cast<ChunkId>(i),
                        dot(query, matrix.rows[i]));
  }
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) {
                     if (a.second != b.second) return a.second > b.second;
                     return a.first < b.first;
                   });
  if (k < scored.size()) scored.resize(k);
  return scored;
}

}  // namespace invar
