#include "invar/lm_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "invar/remote.hpp"
#include "json.hpp"

namespace invar {

using nlohmann::json;

std::vector<double> LmOracle::log_prob_batch(
    std::span<const std::pair<std::string, std::string>> pairs) const {
  std::vector<double> out;
  out.reserve(pairs.size());
  for (const auto& [context, target] : pairs) {
    out.push_back(log_prob(context, target));
  }
  return out;
}

SyntheticOracle::SyntheticOracle(double beta, double gamma)
    : beta_(beta), gamma_(gamma) {
  if (beta < 0.0 || gamma < 0.0) {
    throw Error("oracle beta and gamma must be non-negative");
  }
}

double SyntheticOracle::log_prob(const std::string& context,
                                 const std::string& target) const {
  std::vector<std::string> target_tokens = tokenize(target);
  if (target_tokens.empty()) {
    throw EmptyTarget("oracle target has no tokens");
  }
  std::set<std::string> target_set(target_tokens.begin(), target_tokens.end());
  std::vector<std::string> context_tokens = tokenize(context);
  std::set<std::string> context_set(context_tokens.begin(),
                                    context_tokens.end());
  std::size_t hits = 0;
  for (const std::string& tok : target_set) {
    if (context_set.count(tok) != 0) ++hits;
  }
  double overlap =
      static_cast<double>(hits) / static_cast<double>(target_set.size());
  return beta_ * overlap - gamma_;
}

RemoteOracle::RemoteOracle(std::string endpoint)
    : endpoint_(std::move(endpoint)) {
  if (endpoint_.empty()) throw Error("remote oracle needs an endpoint");
}

double RemoteOracle::log_prob(const std::string& context,
                              const std::string& target) const {
  std::pair<std::string, std::string> pair{context, target};
  return log_prob_batch(std::span<const std::pair<std::string, std::string>>(
                            &pair, 1))
      .front();
}

std::vector<double> RemoteOracle::log_prob_batch(
    std::span<const std::pair<std::string, std::string>> pairs) const {
  for (const auto& [context, target] : pairs) {
    if (tokenize(target).empty()) {
      throw EmptyTarget("oracle target has no tokens");
    }
  }
  json body_pairs = json::array();
  for (const auto& [context, target] : pairs) {
    body_pairs.push_back({{"context", context}, {"target", target}});
  }
  json response = remote::post_json(endpoint_, {{"pairs", body_pairs}});
  if (!response.contains("log_probs") || !response["log_probs"].is_array() ||
      response["log_probs"].size() != pairs.size()) {
    throw RemoteProtocolError("oracle response must carry one log_prob per pair");
  }
  std::vector<double> out;
  out.reserve(pairs.size());
  for (const json& value : response["log_probs"]) {
    double lp = value.get<double>();
    if (!std::isfinite(lp) || lp > 0.0) {
      throw InvalidLogProb("remote log-prob must be finite and <= 0, got " +
                           std::to_string(lp));
    }
    out.push_back(lp);
  }
  return out;
}

std::unique_ptr<LmOracle> make_oracle(const OracleSpec& spec) {
  switch (spec.kind) {
    case OracleKind::Synthetic:
      return std::make_unique<SyntheticOracle>(spec.beta, spec.gamma);
    case OracleKind::Remote:
      return std::make_unique<RemoteOracle>(spec.endpoint);
  }
  throw Error("unknown oracle kind");
}

std::string compose_prompt(const std::string& chunk_text,
                           const std::string& query) {
  return chunk_text + "\n\n" + query;
}

ChunkTextMap chunk_texts(const Corpus& corpus) {
  ChunkTextMap map;
  map.reserve(corpus.chunks.size());
  for (const DocumentChunk& chunk : corpus.chunks) {
    map.emplace(chunk.chunk_id, chunk.text);
  }
  return map;
}

namespace {

const std::string& text_for(const ChunkTextMap& chunks, ChunkId id) {
  auto it = chunks.find(id);
  if (it == chunks.end()) throw MissingChunkText(id);
  return it->second;
}

std::vector<double> candidate_log_probs(const LmOracle& oracle,
                                        const std::string& query,
                                        const std::string& answer,
                                        std::span<const ChunkId> ids,
                                        const ChunkTextMap& chunks) {
  std::vector<std::pair<std::string, std::string>> pairs;
  pairs.reserve(ids.size());
  for (ChunkId id : ids) {
    pairs.emplace_back(compose_prompt(text_for(chunks, id), query), answer);
  }
  return oracle.log_prob_batch(pairs);
}

std::vector<double> softmax_scaled(std::span<const double> log_probs,
                                   double tau) {
  double max_scaled = log_probs[0] / tau;
  for (double lp : log_probs) max_scaled = std::max(max_scaled, lp / tau);
  double denom = 0.0;
  std::vector<double> out(log_probs.size());
  for (std::size_t i = 0; i < log_probs.size(); ++i) {
    out[i] = std::exp(log_probs[i] / tau - max_scaled);
    denom += out[i];
  }
  for (double& x : out) x /= denom;
  return out;
}

}  // namespace

double marginal_prob(const LmOracle& oracle, const std::string& query,
                     const std::string& answer,
                     const RelevanceDistribution& retrieval,
                     const ChunkTextMap& chunks) {
  std::vector<double> log_probs = candidate_log_probs(
      oracle, query, answer, retrieval.support, chunks);
  std::vector<double> terms(log_probs.size());
  for (std::size_t i = 0; i < log_probs.size(); ++i) {
    terms[i] = std::exp(log_probs[i]) * retrieval.probs[i];
  }
  return pairwise_sum(terms);
}

std::vector<double> lsr_scores(const LmOracle& oracle, const std::string& query,
                               const std::string& answer,
                               std::span<const ChunkId> candidate_ids,
                               const ChunkTextMap& chunks, double tau) {
  if (candidate_ids.empty()) {
    throw EmptyCandidates("lsr_scores needs candidates");
  }
  if (!(tau > 0.0)) throw Error("tau must be positive");
  std::vector<double> log_probs =
      candidate_log_probs(oracle, query, answer, candidate_ids, chunks);
  return softmax_scaled(log_probs, tau);
}

double lsr_topk_vs_full_gap(const LmOracle& oracle, const std::string& query,
                            const std::string& answer,
                            std::span<const ChunkId> all_ids,
                            std::span<const ChunkId> topk_ids,
                            const ChunkTextMap& chunks, double tau) {
  if (topk_ids.empty() || all_ids.empty()) {
    throw EmptyCandidates("gap diagnostic needs candidates");
  }
  for (ChunkId id : topk_ids) {
    if (std::find(all_ids.begin(), all_ids.end(), id) == all_ids.end()) {
      throw Error("topk ids must be a subset of all ids");
    }
  }
  std::vector<double> top_scores =
      lsr_scores(oracle, query, answer, topk_ids, chunks, tau);
  std::vector<double> full_scores =
      lsr_scores(oracle, query, answer, all_ids, chunks, tau);
  double gap = 0.0;
  for (std::size_t i = 0; i < topk_ids.size(); ++i) {
    std::size_t full_pos =
        static_cast<std::size_t>(std::find(all_ids.begin(), all_ids.end(),
                                           topk_ids[i]) -
                                 all_ids.begin());
    gap = std::max(gap, std::abs(top_scores[i] - full_scores[full_pos]));
  }
  return gap;
}

}  // namespace invar
