// Chunked document corpus: sliding-window chunking over whitespace tokens,
// context-window resizing with an overlap provenance map, gold labels, and
// JSONL persistence.
//
// Chunk text is rebuilt from lowercased tokens joined by single spaces, so a
// chunk's bytes are a pure function of the token sequence. That keeps corpus
// round-trips, the overlap oracle, and metric normalization mutually
// consistent.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "invar/common.hpp"

namespace invar {

using ChunkId = std::uint32_t;

struct DocumentChunk {
  ChunkId chunk_id = 0;
  std::string source_id;
  std::string text;
  std::size_t token_count = 0;
};

struct Corpus {
  std::vector<DocumentChunk> chunks;  // chunk_ids dense 0..n-1 in order
  std::size_t window = 0;
  std::size_t stride = 0;
  std::string label;

  std::size_t size() const { return chunks.size(); }
  const std::string& text_of(ChunkId id) const;
};

struct GoldLabel {
  std::string query_id;
  std::string query;
  std::vector<ChunkId> gold_chunk_ids;  // ascending, no duplicates
  std::vector<std::string> gold_answers;
};

// provenance[derived_chunk_id] = base chunk_ids it shares tokens with,
// ascending.
using ProvenanceMap = std::vector<std::vector<ChunkId>>;

// Window spans over the token sequence: span i starts at token i*stride;
// emission stops with the first span that reaches the end of the text, so the
// last span may be short but no span is redundant.
std::vector<std::string> chunk_text(std::string_view text, std::size_t window,
                                    std::size_t stride);

// In-memory corpus construction from (source_id, text) documents, file order
// then window order.
Corpus build_corpus(const std::vector<std::pair<std::string, std::string>>& docs,
                    std::size_t window, std::size_t stride);

// Reads JSONL documents {"source_id": ..., "text": ...} and chunks them.
Corpus ingest_jsonl(const std::string& path, std::size_t window,
                    std::size_t stride);

struct ResizeResult {
  Corpus corpus;
  ProvenanceMap provenance;
};

// Re-chunks the reconstructed source token streams with
// window' = max(1, round(window*factor)) and stride' = window'.
ResizeResult resize_corpus(const Corpus& base, double factor);

// A derived chunk inherits gold status when it overlaps any gold base chunk.
std::vector<ChunkId> map_gold_through(const ProvenanceMap& provenance,
                                      const std::vector<ChunkId>& base_gold);

// Persisted form: header line {"window","stride","label"}, then one chunk
// record {"chunk_id","source_id","text"} per line.
void save_corpus(const Corpus& corpus, const std::string& path);
Corpus load_corpus(const std::string& path);

// Gold JSONL: {"query_id","query","gold_chunk_ids","gold_answers"} per line.
std::vector<GoldLabel> load_gold(const std::string& path);
void save_gold(const std::vector<GoldLabel>& labels, const std::string& path);

}  // namespace invar
