// Retrieval and generation evaluation: hit-rate at k over gold chunk labels,
// normalized-containment exact match, and a versioned report artifact
// (JSON plus an aligned text table, byte-stable for identical inputs).
#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "invar/corpus.hpp"

namespace invar {

// Ordered maps keep aggregate arithmetic independent of insertion order.
using RankedRetrievals = std::map<std::string, std::vector<ChunkId>>;
using GoldMap = std::map<std::string, std::vector<ChunkId>>;

// Fraction of queries whose top-k ranked ids intersect their gold set.
// Lists shorter than k are evaluated over the ranks they have.
double acc_at_k(const RankedRetrievals& retrievals, const GoldMap& gold,
                std::size_t k);

// Lowercase, delete punctuation, drop the articles a/an/the, collapse
// whitespace. The containment rule for exact match runs on this form.
std::string normalize_answer(std::string_view s);

// True iff any normalized gold string occurs inside the normalized
// prediction.
bool exact_match(const std::string& prediction,
                 std::span<const std::string> gold_answers);

struct QueryEval {
  std::string query_id;
  std::map<int, bool> hit_at;  // keyed by the report's k values
  bool em = false;
};

struct EvalReport {
  std::vector<int> ks;
  std::map<int, double> acc_at;
  double exact_match = 0.0;
  bool em_evaluated = false;
  std::vector<QueryEval> per_query;
  std::string config_hash;
};

// Aggregates are recomputed from per_query here; nothing else writes them.
EvalReport make_report(std::vector<QueryEval> per_query,
                       std::span<const int> ks, bool em_evaluated,
                       std::string config_hash);

// Writes <path> as JSON and <path>.txt as the aligned table.
void emit_report(const EvalReport& report, const std::string& path);

EvalReport load_report(const std::string& path);

}  // namespace invar
