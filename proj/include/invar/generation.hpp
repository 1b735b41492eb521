// Generation-stage constructs: one prompt instance per retrieved chunk
// (chunk text, blank line, query), greedy token-budget packing, the summed
// negative log-likelihood over instances, and candidate-pool answer
// selection by marginal probability.
#pragma once

#include <span>
#include <string>
#include <vector>

#include "invar/lm_oracle.hpp"
#include "invar/scoring.hpp"

namespace invar {

struct PromptInstance {
  ChunkId chunk_id = 0;
  std::string prompt_text;  // chunk text + "\n\n" + query
  std::string target;
  std::size_t token_count = 0;  // engine token rule applied to prompt_text
};

// One instance per retrieved chunk, retrieval order preserved, at most k_bar.
std::vector<PromptInstance> expand_instances(const std::string& query,
                                             const std::string& gold_answer,
                                             std::span<const ChunkId> retrieved,
                                             const ChunkTextMap& chunks,
                                             std::size_t k_bar = 5);

struct Pack {
  std::vector<std::size_t> instance_indices;  // into the input list, in order
  std::size_t token_total = 0;
  bool oversize = false;  // single instance above the budget; kept whole
};

// Greedy in input order; a pack closes when the next instance would push it
// past max_tokens. An instance that alone exceeds the budget becomes its own
// pack flagged oversize.
std::vector<Pack> pack_examples(std::span<const PromptInstance> instances,
                                std::size_t max_tokens = 4096);

// Negative sum of log p(target | prompt) over the instances.
double gen_loss(std::span<const PromptInstance> instances,
                const LmOracle& oracle);

// Candidate with the highest retrieval-weighted answer probability; ties go
// to the lexicographically smallest string.
std::string predict_answer(const std::string& query,
                           std::span<const std::string> candidate_answers,
                           const RelevanceDistribution& retrieval,
                           const ChunkTextMap& chunks, const LmOracle& oracle);

// JSONL rows {"prompt", "target", "pack_id"}, pack order then in-pack order.
void export_finetune_jsonl(std::span<const PromptInstance> instances,
                           std::span<const Pack> packs,
                           const std::string& path);

}  // namespace invar
