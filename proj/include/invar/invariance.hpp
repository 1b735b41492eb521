// The intervention grid and the variance penalty built on it. Two
// interventions (query rewrite, context-window resize) give four cells; each
// cell is scored by retrieval-with-adapter then by answer log-likelihood
// softmax; a cross-cell aggregate splits the top-k into a stable pattern
// (d_in) and a variant remainder (d_var); the loss is the population variance
// of the alignment KL over candidate sets d_in + D for subsets D of d_var.
//
// Resized-cell scores project onto base chunk ids through the overlap
// provenance map (max pooling by default); subset candidate sets map the
// other way, base ids to every overlapping resized chunk.
#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "invar/alignment.hpp"
#include "invar/lm_oracle.hpp"
#include "json.hpp"

namespace invar {

// ---------------------------------------------------------------------------
// Rewriters
// ---------------------------------------------------------------------------

class QueryRewriter {
 public:
  virtual ~QueryRewriter() = default;
  virtual std::string rewrite(const std::string& query) const = 0;
};

// Frozen deterministic rule chain: lowercase tokenization, article removal
// ("a", "an", "the"), then left rotation by one token. Golden tests pin the
// outputs.
class BuiltinRewriter : public QueryRewriter {
 public:
  std::string rewrite(const std::string& query) const override;
};

class IdentityRewriter : public QueryRewriter {
 public:
  std::string rewrite(const std::string& query) const override {
    return query;
  }
};

// POSTs {"query": ...} and expects {"rewritten": ...}; every failure surfaces
// as RewriterFailure, which build_grid converts into the builtin fallback.
class RemoteRewriter : public QueryRewriter {
 public:
  explicit RemoteRewriter(std::string endpoint);
  std::string rewrite(const std::string& query) const override;

 private:
  std::string endpoint_;
};

// ---------------------------------------------------------------------------
// Grid
// ---------------------------------------------------------------------------

struct GridCell {
  bool rewritten_query = false;
  bool resized_corpus = false;
};

/// Fixed cell order: (base q, base D), (rewritten q, base D),
// (base q, resized D), (rewritten q, resized D).
inline constexpr std::array<GridCell, 4> kGridCells{
    {{false, false}, {true, false}, {false, true}, {true, true}}};

struct InterventionGrid {
  std::string base_query;
  std::string rewritten_query;
  std::shared_ptr<const Corpus> base_corpus;
  std::shared_ptr<const Corpus> resized_corpus;
  std::shared_ptr<const ProvenanceMap> provenance;          // resized -> base
  std::shared_ptr<const ProvenanceMap> inverse_provenance;  // base -> resized
  double resize_factor = 0.5;
  bool rewriter_fell_back = false;
};

// Resizes inside; a rewriter failure falls back to the builtin rewriter and
// sets the warning flag instead of throwing.
InterventionGrid build_grid(const std::string& query,
                            const QueryRewriter& rewriter,
                            std::shared_ptr<const Corpus> base, double factor);

// Same, with the resized corpus and provenance prebuilt (the trainer shares
// one resize across all queries).
InterventionGrid build_grid(const std::string& query,
                            const QueryRewriter& rewriter,
                            std::shared_ptr<const Corpus> base,
                            std::shared_ptr<const Corpus> resized,
                            std::shared_ptr<const ProvenanceMap> provenance,
                            double factor);

ProvenanceMap invert_provenance(const ProvenanceMap& provenance,
                                std::size_t base_size);

// ---------------------------------------------------------------------------
// Cell scoring
// ---------------------------------------------------------------------------

enum class Pooling { Max, Sum };
enum class Aggregation { Mean, Min };

// Everything score_grid and the loss need besides the grid itself. Matrices
// and text maps are shared across queries; the two query embeddings are per
// query.
struct GridEmbeddings {
  Embedding vq_base;
  Embedding vq_rewritten;
  std::shared_ptr<const EmbeddingMatrix> coarse_base;
  std::shared_ptr<const EmbeddingMatrix> llm_base;
  std::shared_ptr<const EmbeddingMatrix> coarse_resized;
  std::shared_ptr<const EmbeddingMatrix> llm_resized;
  std::shared_ptr<const ChunkTextMap> texts_base;
  std::shared_ptr<const ChunkTextMap> texts_resized;
};

struct CellScores {
  // Native chunk space, retrieval order (renormalized prob desc, id asc).
  std::vector<ChunkId> native_ids;
  std::vector<double> relevance;  // renormalized adapted probs, sum 1
  std::vector<double> lsr;        // answer-likelihood softmax, sum 1
  // Base-space projection, ranked by pooled relevance desc then id asc. For
  // base-corpus cells this is the native data unchanged.
  std::vector<ChunkId> base_ids;
  std::vector<double> base_relevance;
  std::vector<double> base_lsr;
};

struct LSRTable {
  std::array<CellScores, 4> cells;  // kGridCells order
  double tau = 1.0;
};

LSRTable score_grid(const InterventionGrid& grid, const std::string& answer,
                    const LmOracle& oracle, const GridEmbeddings& embeddings,
                    const AdapterParams& params, std::size_t k, double tau,
                    Pooling pooling = Pooling::Max);

// ---------------------------------------------------------------------------
// Partition and loss
// ---------------------------------------------------------------------------

struct PatternPartition {
  std::vector<ChunkId> d_in;   // top-l by cross-cell aggregate
  std::vector<ChunkId> d_var;  // remaining top-k members
  std::size_t l = 0;
  std::size_t k = 0;  // size of the base-cell candidate set
};

// Ranks the base cell's top-k by the cross-cell aggregate of pooled scores
/// (mean: sum over the 4 cells / 4, absent cells contribute 0; min: minimum
// over the 4 cells with 0 for absent).
PatternPartition partition_patterns(const LSRTable& table, std::size_t l,
                                    Aggregation aggregation);

struct InvarianceConfig {
  std::size_t l = 4;
  std::size_t k = 16;
  double lambda = 1.0;
  double tau = 1.0;
  std::size_t subset_samples = 32;  // M, used when not exhaustive
  bool exhaustive = true;           // exhaustive when |d_var| <= 8
  std::uint64_t subset_seed = 0;
  Aggregation aggregation = Aggregation::Mean;
  Pooling pooling = Pooling::Max;
  double resize_factor = 0.5;
};

struct InvarianceResult {
  double value = 0.0;
  bool empty_variant = false;
};

// Variance with the 1/N (not 1/(N-1)) normalizer; 0 for a single value.
// Mean and squared deviations are reduced with pairwise_sum so the result
// does not depend on how callers partition the work.
double population_variance(std::span<const double> values);

struct InvarianceGradResult {
  double value = 0.0;
  bool empty_variant = false;
  AdapterGrad grad;
};

// Population variance over per-subset values; each subset value is the mean
// over the 4 cells of the alignment KL restricted to d_in + D (mapped into
// the cell's chunk space). Subset enumeration is exhaustive over d_var
// (ascending id, bitmask order) when allowed and |d_var| <= 8, else M draws
// with independent 0.5 inclusion from splitmix64(subset_seed).
InvarianceResult invariance_loss(const PatternPartition& partition,
                                 const InterventionGrid& grid,
                                 const GridEmbeddings& embeddings,
                                 const AdapterParams& params,
                                 const InvarianceConfig& cfg,
                                 unsigned jobs = 1);

// Same value plus the exact gradient; subset membership and the partition are
// constants, so only the KL terms differentiate.
InvarianceGradResult invariance_loss_grad(const PatternPartition& partition,
                                          const InterventionGrid& grid,
                                          const GridEmbeddings& embeddings,
                                          const AdapterParams& params,
                                          const InvarianceConfig& cfg,
                                          bool training = false,
                                          std::uint64_t step_seed = 0,
                                          unsigned jobs = 1);

double total_loss(double rl, double invar, double lambda);

// Per-cell ranked (chunk_id, relevance, lsr) triples in base space plus the
// top-5 membership churn against the base cell.
nlohmann::json variance_report(const InterventionGrid& grid,
                               const LSRTable& table);

}  // namespace invar
