#include "invar/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace invar {

using nlohmann::json;

const std::string& Corpus::text_of(ChunkId id) const {
  if (id >= chunks.size()) {
    throw Error("chunk id " + std::to_string(id) + " out of range (corpus " +
                label + " has " + std::to_string(chunks.size()) + " chunks)");
  }
  return chunks[id].text;
}

namespace {

std::string join_tokens(const std::vector<std::string>& tokens,
                        std::size_t begin, std::size_t end) {
  std::string out;
  for (std::size_t i = begin; i < end; ++i) {
    if (i > begin) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

void check_window(std::size_t window, std::size_t stride) {
  if (window == 0) throw InvalidWindow("window must be positive");
  if (stride == 0 || stride > window) {
    throw InvalidWindow("stride must be in [1, window]; got stride=" +
                        std::to_string(stride) + " window=" +
                        std::to_string(window));
  }
}

struct TokenSpan {
  std::size_t start = 0;
  std::size_t count = 0;
};

std::vector<TokenSpan> window_spans(std::size_t n_tokens, std::size_t window,
                                    std::size_t stride) {
  std::vector<TokenSpan> spans;
  for (std::size_t i = 0;; ++i) {
    std::size_t start = i * stride;
    if (start >= n_tokens) break;
    std::size_t end = std::min(start + window, n_tokens);
    spans.push_back({start, end - start});
    if (start + window >= n_tokens) break;  // this span reached the end
  }
  return spans;
}

// Inverts overlapping windows back to the source token stream: chunk 0
// contributes all its tokens, later chunks contribute the tokens past the
// previous window's end.
std::vector<std::string> reconstruct_tokens(
    const std::vector<const DocumentChunk*>& chunks, std::size_t window,
    std::size_t stride) {
  std::vector<std::string> tokens;
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    std::vector<std::string> chunk_tokens = tokenize(chunks[i]->text);
    std::size_t skip = (i == 0) ? 0 : window - stride;
    if (skip > chunk_tokens.size()) {
      throw Error("corpus chunk " + std::to_string(chunks[i]->chunk_id) +
                  " shorter than window overlap; cannot reconstruct source");
    }
    tokens.insert(tokens.end(), chunk_tokens.begin() + skip,
                  chunk_tokens.end());
  }
  return tokens;
}

}  // namespace

std::vector<std::string> chunk_text(std::string_view text, std::size_t window,
                                    std::size_t stride) {
  check_window(window, stride);
  std::vector<std::string> tokens = tokenize(text);
  std::vector<std::string> out;
  for (const TokenSpan& span : window_spans(tokens.size(), window, stride)) {
    out.push_back(join_tokens(tokens, span.start, span.start + span.count));
  }
  return out;
}

Corpus build_corpus(const std::vector<std::pair<std::string, std::string>>& docs,
                    std::size_t window, std::size_t stride) {
  check_window(window, stride);
  Corpus corpus;
  corpus.window = window;
  corpus.stride = stride;
  corpus.label = "base";
  for (const auto& [source_id, text] : docs) {
    for (std::string& span : chunk_text(text, window, stride)) {
      DocumentChunk chunk;
      chunk.chunk_id = static_cast<ChunkId>(corpus.chunks.size());
      chunk.source_id = source_id;
      chunk.token_count = tokenize(span).size();
      chunk.text = std::move(span);
      corpus.chunks.push_back(std::move(chunk));
    }
  }
  if (corpus.chunks.empty()) throw EmptyCorpus("no chunks produced");
  return corpus;
}

Corpus ingest_jsonl(const std::string& path, std::size_t window,
                    std::size_t stride) {
  check_window(window, stride);
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::pair<std::string, std::string>> docs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json record = json::parse(line, nullptr, false);
    if (record.is_discarded() || !record.is_object()) {
      throw MalformedLine(line_no, "not a JSON object");
    }
    if (!record.contains("source_id") || !record["source_id"].is_string()) {
      throw MalformedLine(line_no, "missing string field source_id");
    }
    if (!record.contains("text") || !record["text"].is_string()) {
      throw MalformedLine(line_no, "missing string field text");
    }
    docs.emplace_back(record["source_id"].get<std::string>(),
                      record["text"].get<std::string>());
  }
  if (docs.empty()) throw EmptyCorpus("no documents in " + path);
  return build_corpus(docs, window, stride);
}

ResizeResult resize_corpus(const Corpus& base, double factor) {
  if (!(factor > 0.0)) {
    throw InvalidFactor("resize factor must be positive, got " +
                        std::to_string(factor));
  }
  std::size_t new_window = static_cast<std::size_t>(std::max(
      1.0, std::round(static_cast<double>(base.window) * factor)));

  ResizeResult result;
  result.corpus.window = new_window;
  result.corpus.stride = new_window;
  char label[48];
  std::snprintf(label, sizeof(label), "resized:%g", factor);
  result.corpus.label = label;

  // Group base chunks by source in corpus order; sources never interleave.
  std::vector<std::pair<std::string, std::vector<const DocumentChunk*>>> groups;
  for (const DocumentChunk& chunk : base.chunks) {
    if (groups.empty() || groups.back().first != chunk.source_id) {
      groups.emplace_back(chunk.source_id,
                          std::vector<const DocumentChunk*>{});
    }
    groups.back().second.push_back(&chunk);
  }

  for (const auto& [source_id, chunks] : groups) {
    std::vector<std::string> tokens =
        reconstruct_tokens(chunks, base.window, base.stride);

    // Base chunk j of this source covers tokens [j*stride, j*stride+count).
    std::vector<TokenSpan> base_spans;
    for (std::size_t j = 0; j < chunks.size(); ++j) {
      base_spans.push_back({j * base.stride, chunks[j]->token_count});
    }

    for (const TokenSpan& span :
         window_spans(tokens.size(), new_window, new_window)) {
      DocumentChunk chunk;
      chunk.chunk_id = static_cast<ChunkId>(result.corpus.chunks.size());
      chunk.source_id = source_id;
      chunk.text = join_tokens(tokens, span.start, span.start + span.count);
      chunk.token_count = span.count;
      result.corpus.chunks.push_back(std::move(chunk));

      std::vector<ChunkId> overlaps;
      for (std::size_t j = 0; j < base_spans.size(); ++j) {
        bool disjoint = base_spans[j].start >= span.start + span.count ||
                        span.start >= base_spans[j].start + base_spans[j].count;
        if (!disjoint) overlaps.push_back(chunks[j]->chunk_id);
      }
      result.provenance.push_back(std::move(overlaps));
    }
  }
  if (result.corpus.chunks.empty()) {
    throw EmptyCorpus("resize produced no chunks");
  }
  return result;
}

std::vector<ChunkId> map_gold_through(const ProvenanceMap& provenance,
                                      const std::vector<ChunkId>& base_gold) {
  std::vector<ChunkId> out;
  for (std::size_t derived = 0; derived < provenance.size(); ++derived) {
    for (ChunkId base_id : provenance[derived]) {
      if (std::find(base_gold.begin(), base_gold.end(), base_id) !=
          base_gold.end()) {
        out.push_back(static_cast<ChunkId>(derived));
        break;
      }
    }
  }
  return out;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  json header = {{"window", corpus.window},
                 {"stride", corpus.stride},
                 {"label", corpus.label}};
  out << header.dump() << "\n";
  for (const DocumentChunk& chunk : corpus.chunks) {
    json record = {{"chunk_id", chunk.chunk_id},
                   {"source_id", chunk.source_id},
                   {"text", chunk.text}};
    out << record.dump() << "\n";
  }
  if (!out) throw IoError("write failed for " + path);
}

Corpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw EmptyCorpus("empty corpus file " + path);
  json header = json::parse(line, nullptr, false);
  if (header.is_discarded() || !header.is_object() ||
      !header.contains("window") || !header.contains("stride") ||
      !header.contains("label")) {
    throw MalformedLine(1, "corpus header must carry window/stride/label");
  }
  Corpus corpus;
  corpus.window = header["window"].get<std::size_t>();
  corpus.stride = header["stride"].get<std::size_t>();
  corpus.label = header["label"].get<std::string>();
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json record = json::parse(line, nullptr, false);
    if (record.is_discarded() || !record.contains("chunk_id") ||
        !record.contains("source_id") || !record.contains("text")) {
      throw MalformedLine(line_no, "bad chunk record");
    }
    DocumentChunk chunk;
    chunk.chunk_id = record["chunk_id"].get<ChunkId>();
    if (chunk.chunk_id != corpus.chunks.size()) {
      throw MalformedLine(line_no, "chunk ids must be dense from 0");
    }
    chunk.source_id = record["source_id"].get<std::string>();
    chunk.text = record["text"].get<std::string>();
    chunk.token_count = tokenize(chunk.text).size();
    corpus.chunks.push_back(std::move(chunk));
  }
  if (corpus.chunks.empty()) throw EmptyCorpus("no chunks in " + path);
  return corpus;
}

std::vector<GoldLabel> load_gold(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<GoldLabel> labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json record = json::parse(line, nullptr, false);
    if (record.is_discarded() || !record.is_object() ||
        !record.contains("query_id") || !record.contains("query")) {
      throw MalformedLine(line_no, "bad gold record");
    }
    GoldLabel label;
    label.query_id = record["query_id"].get<std::string>();
    label.query = record["query"].get<std::string>();
    if (record.contains("gold_chunk_ids")) {
      for (const auto& id : record["gold_chunk_ids"]) {
        label.gold_chunk_ids.push_back(id.get<ChunkId>());
      }
      std::sort(label.gold_chunk_ids.begin(), label.gold_chunk_ids.end());
      label.gold_chunk_ids.erase(
          std::unique(label.gold_chunk_ids.begin(), label.gold_chunk_ids.end()),
          label.gold_chunk_ids.end());
    }
    if (record.contains("gold_answers")) {
      for (const auto& answer : record["gold_answers"]) {
        label.gold_answers.push_back(answer.get<std::string>());
      }
    }
    labels.push_back(std::move(label));
  }
  return labels;
}

void save_gold(const std::vector<GoldLabel>& labels, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (const GoldLabel& label : labels) {
    json record = {{"query_id", label.query_id},
                   {"query", label.query},
                   {"gold_chunk_ids", label.gold_chunk_ids},
                   {"gold_answers", label.gold_answers}};
    out << record.dump() << "\n";
  }
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace invar
