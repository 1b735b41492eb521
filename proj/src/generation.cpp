#include "invar/generation.hpp"

#include <fstream>

#include "json.hpp"

namespace invar {

std::vector<PromptInstance> expand_instances(const std::string& query,
                                             const std::string& gold_answer,
                                             std::span<const ChunkId> retrieved,
                                             const ChunkTextMap& chunks,
                                             std::size_t k_bar) {
  if (k_bar == 0) throw Error("k_bar must be at least 1");
  if (retrieved.empty()) {
    throw NoRetrievedChunks("no retrieved chunks to expand");
  }
  std::size_t n = std::min(k_bar, retrieved.size());
  std::vector<PromptInstance> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto it = chunks.find(retrieved[i]);
    if (it == chunks.end()) throw MissingChunkText(retrieved[i]);
    PromptInstance inst;
    inst.chunk_id = retrieved[i];
    inst.prompt_text = compose_prompt(it->second, query);
    inst.target = gold_answer;
    inst.token_count = tokenize(inst.prompt_text).size();
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<Pack> pack_examples(std::span<const PromptInstance> instances,
                                std::size_t max_tokens) {
  std::vector<Pack> packs;
  Pack current;
  auto flush = [&] {
    if (!current.instance_indices.empty()) {
      packs.push_back(std::move(current));
      current = Pack{};
    }
  };
  for (std::size_t i = 0; i < instances.size(); ++i) {
    std::size_t tokens = instances[i].token_count;
    if (tokens > max_tokens) {
      flush();
      packs.push_back({{i}, tokens, true});
      continue;
    }
    if (current.token_total + tokens > max_tokens) flush();
    current.instance_indices.push_back(i);
    current.token_total += tokens;
  }
  flush();
  return packs;
}

double gen_loss(std::span<const PromptInstance> instances,
                const LmOracle& oracle) {
  if (instances.empty()) throw Error("gen_loss needs at least one instance");
  std::vector<std::pair<std::string, std::string>> pairs;
  pairs.reserve(instances.size());
  for (const PromptInstance& inst : instances) {
    pairs.emplace_back(inst.prompt_text, inst.target);
  }
  std::vector<double> logps = oracle.log_prob_batch(pairs);
  return -pairwise_sum(logps);
}

std::string predict_answer(const std::string& query,
                           std::span<const std::string> candidate_answers,
                           const RelevanceDistribution& retrieval,
                           const ChunkTextMap& chunks,
                           const LmOracle& oracle) {
  if (candidate_answers.empty()) {
    throw EmptyCandidatePool("no candidate answers");
  }
  std::string best;
  double best_prob = 0.0;
  bool have_best = false;
  for (const std::string& candidate : candidate_answers) {
    double prob = marginal_prob(oracle, query, candidate, retrieval, chunks);
    if (!have_best || prob > best_prob ||
        (prob == best_prob && candidate < best)) {
      best = candidate;
      best_prob = prob;
      have_best = true;
    }
  }
  return best;
}

void export_finetune_jsonl(std::span<const PromptInstance> instances,
                           std::span<const Pack> packs,
                           const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path);
  for (std::size_t p = 0; p < packs.size(); ++p) {
    for (std::size_t idx : packs[p].instance_indices) {
      if (idx >= instances.size()) throw Error("pack references no instance");
      nlohmann::json row{{"prompt", instances[idx].prompt_text},
                         {"target", instances[idx].target},
                         {"pack_id", p}};
      out << row.dump() << '\n';
    }
  }
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace invar
