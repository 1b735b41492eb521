// The distribution-alignment objective: KL between the adapted relevance
// softmax and the detached target softmax over one candidate set, plus its
// exact analytic gradient through the adapter (softmax Jacobian, score dot,
// normalization Jacobian (I - v'v'^T)/|u|, then the low-rank factors).
//
// The pool/subset split exists because the invariance penalty evaluates the
// same KL on many overlapping candidate subsets: adapter forwards are
// computed once per pool, then each subset is just a softmax over cached
// scores.
//
// Conventions, frozen here: the candidate set is chosen by adapted scores on
// the inference path and treated as constant; target scores always use the
// raw query embedding and carry no gradient; with a document-side adapter the
// per-candidate dropout stream is seeded by mix_seed(step_seed, chunk_id),
// with a query-side adapter by step_seed itself.
#pragma once

#include <span>
#include <string>
#include <vector>

#include "invar/adapter.hpp"
#include "invar/scoring.hpp"

namespace invar {

struct CandidateState {
  ChunkId id = 0;
  double adapted_score = 0.0;  // s_j, via the adapter's side
  double target_score = 0.0;   // raw vq . llm_j, detached
  Embedding input;             // coarse row (the adapter's input on doc side)
  AdapterForward fwd;          // document-side forward; unused on query side
};

struct PoolState {
  Embedding vq;
  AdapterForward query_fwd;  // populated only for a query-side adapter
  std::vector<CandidateState> cands;
};

// coarse/llm are aligned with ids.
PoolState make_pool_state(const Embedding& vq, std::span<const ChunkId> ids,
                          std::span<const Embedding> coarse,
                          std::span<const Embedding> llm,
                          const AdapterParams& params, bool training,
                          std::uint64_t step_seed);

// KL(adapted softmax || target softmax) over cands[subset]; when grad_out is
// non-null the gradient is accumulated into it (scaled by 1).
double pool_kl(const PoolState& pool, const AdapterParams& params,
               std::span<const std::size_t> subset, AdapterGrad* grad_out);

// Every chunk scored on the inference path (document side: vq . adapt(v_j);
// query side: adapt(vq) . v_j), sorted score descending, ties by ascending
// id. Retrieval, candidate selection, and eval all rank through this.
std::vector<std::pair<ChunkId, double>> adapted_ranking(
    const Embedding& vq, const EmbeddingMatrix& coarse,
    const AdapterParams& params);

struct AlignmentBatch {
  std::string query_id;
  Embedding vq;
  std::vector<ChunkId> candidate_ids;  // top-k by adapted score, ties low id
  std::vector<Embedding> coarse;       // aligned with candidate_ids
  std::vector<Embedding> llm;
};

AlignmentBatch build_batch(const Embedding& vq, const EmbeddingMatrix& coarse,
                           const EmbeddingMatrix& llm,
                           const AdapterParams& params, std::size_t k,
                           const std::string& query_id = "");

double rl_loss(const AlignmentBatch& batch, const AdapterParams& params,
               bool training = false, std::uint64_t step_seed = 0);

struct RlLossGrad {
  double loss = 0.0;
  AdapterGrad grad;
};

RlLossGrad rl_loss_grad(const AlignmentBatch& batch,
                        const AdapterParams& params, bool training = false,
                        std::uint64_t step_seed = 0);

// Mean per-query loss; pairwise-summed in batch order.
double rl_loss_corpus(std::span<const AlignmentBatch> batches,
                      const AdapterParams& params);

}  // namespace invar
