// Answer log-likelihood oracles and the scores built from them: the marginal
// answer probability under a retrieval distribution and the temperature
// softmax over per-candidate log-likelihoods.
//
// The synthetic oracle scores token-set overlap: log p = beta *
// |tokset(target) & tokset(context)| / |tokset(target)| - gamma, with
// lowercase whitespace token sets. With the default beta = gamma = 5 a
// context containing every target token gets probability 1 and a disjoint
// context gets e^-5.
//
// Prompt composition is global and frozen: chunk text + "\n\n" + query text.
#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "invar/corpus.hpp"
#include "invar/scoring.hpp"

namespace invar {

enum class OracleKind { Synthetic, Remote };

struct OracleSpec {
  OracleKind kind = OracleKind::Synthetic;
  double beta = 5.0;
  double gamma = 5.0;
  std::string endpoint;  // remote only
};

class LmOracle {
 public:
  virtual ~LmOracle() = default;
  // log p(target | context); always <= 0 and finite. EmptyTarget when the
  // target has no tokens.
  virtual double log_prob(const std::string& context,
                          const std::string& target) const = 0;
  virtual std::vector<double> log_prob_batch(
      std::span<const std::pair<std::string, std::string>> pairs) const;
};

class SyntheticOracle : public LmOracle {
 public:
  SyntheticOracle(double beta, double gamma);
  double log_prob(const std::string& context,
                  const std::string& target) const override;

 private:
  double beta_;
  double gamma_;
};

// POSTs {"pairs": [{"context", "target"}, ...]} and expects {"log_probs":
// [...]} aligned by index; each value must be finite and <= 0.
class RemoteOracle : public LmOracle {
 public:
  explicit RemoteOracle(std::string endpoint);
  double log_prob(const std::string& context,
                  const std::string& target) const override;
  std::vector<double> log_prob_batch(
      std::span<const std::pair<std::string, std::string>> pairs)
      const override;

 private:
  std::string endpoint_;
};

std::unique_ptr<LmOracle> make_oracle(const OracleSpec& spec);

// The global composition operator for (chunk, query) prompts.
std::string compose_prompt(const std::string& chunk_text,
                           const std::string& query);

using ChunkTextMap = std::unordered_map<ChunkId, std::string>;
ChunkTextMap chunk_texts(const Corpus& corpus);

// Sum over the support of p(answer | chunk o query) * P(chunk | query).
double marginal_prob(const LmOracle& oracle, const std::string& query,
                     const std::string& answer,
                     const RelevanceDistribution& retrieval,
                     const ChunkTextMap& chunks);

// Temperature softmax over per-candidate answer log-likelihoods; aligned with
// candidate_ids; sums to 1.
std::vector<double> lsr_scores(const LmOracle& oracle, const std::string& query,
                               const std::string& answer,
                               std::span<const ChunkId> candidate_ids,
                               const ChunkTextMap& chunks, double tau);

// Max over topk_ids of |top-k-normalized - fully-normalized| score; the
// quality gauge for normalizing over a candidate subset instead of the whole
// corpus.
double lsr_topk_vs_full_gap(const LmOracle& oracle, const std::string& query,
                            const std::string& answer,
                            std::span<const ChunkId> all_ids,
                            std::span<const ChunkId> topk_ids,
                            const ChunkTextMap& chunks, double tau);

}  // namespace invar
