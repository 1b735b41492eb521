// Relevance scores and distributions: raw dot-product scores, the top-k
// renormalized softmax, and KL divergence between distributions on a common
// candidate set. All pure functions; natural log throughout.
#pragma once

#include <span>
#include <utility>
#include <vector>

#include "invar/embedding.hpp"

namespace invar {

struct RelevanceDistribution {
  // Sorted by descending probability, ties by ascending chunk_id.
  std::vector<ChunkId> support;
  std::vector<double> probs;  // aligned with support; positive; sums to 1
};

double raw_score(const Embedding& vq, const Embedding& vd);

// Picks the k highest scores (ties toward lower chunk_id), then softmax with
// max-subtraction over exactly those scores. Duplicate chunk_ids in the input
// are a contract violation.
RelevanceDistribution renormalize_topk(
    std::span<const std::pair<ChunkId, double>> scores, std::size_t k);

// Sum of p_i * ln(p_i / q_i) after canonically sorting both supports by
// chunk_id; the supports must contain the same ids.
double kl_divergence(const RelevanceDistribution& p,
                     const RelevanceDistribution& q);

}  // namespace invar
