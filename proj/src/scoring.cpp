#include "invar/scoring.hpp"

#include <algorithm>
#include <cmath>

namespace invar {

double raw_score(const Embedding& vq, const Embedding& vd) {
  return dot(vq, vd);
}

RelevanceDistribution renormalize_topk(
    std::span<const std::pair<ChunkId, double>> scores, std::size_t k) {
  if (scores.empty()) throw Error("renormalize_topk needs scores");
  if (k == 0) throw Error("renormalize_topk needs k >= 1");
  for (const auto& [id, score] : scores) {
    if (!std::isfinite(score)) throw NonFiniteScore(id);
  }

  {
    std::vector<ChunkId> ids;
    ids.reserve(scores.size());
    for (const auto& [id, score] : scores) ids.push_back(id);
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
      throw Error("duplicate chunk id in scores");
    }
  }

  std::vector<std::pair<ChunkId, double>> selected(scores.begin(),
                                                   scores.end());
  std::sort(selected.begin(), selected.end(),
            [](const auto& a, const auto& b) {
              if (a.second != b.second) return a.second > b.second;
              return a.first < b.first;
            });
  if (k < selected.size()) selected.resize(k);

  double max_score = selected.front().second;
  for (const auto& [id, score] : selected) {
    max_score = std::max(max_score, score);
  }
  double denom = 0.0;
  std::vector<double> exps(selected.size());
  for (std::size_t i = 0; i < selected.size(); ++i) {
    exps[i] = std::exp(selected[i].second - max_score);
    denom += exps[i];
  }

  RelevanceDistribution dist;
  dist.support.reserve(selected.size());
  dist.probs.reserve(selected.size());
  // selected is already (score desc, id asc); equal scores give equal probs,
  // so this is also (prob desc, id asc).
  for (std::size_t i = 0; i < selected.size(); ++i) {
    dist.support.push_back(selected[i].first);
    dist.probs.push_back(exps[i] / denom);
  }
  return dist;
}

namespace {

std::vector<std::size_t> order_by_chunk_id(const RelevanceDistribution& d) {
  std::vector<std::size_t> idx(d.support.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return d.support[a] < d.support[b];
  });
  return idx;
}

}  // namespace

double kl_divergence(const RelevanceDistribution& p,
                     const RelevanceDistribution& q) {
  if (p.support.size() != q.support.size()) {
    throw SupportMismatch("support sizes differ: " +
                          std::to_string(p.support.size()) + " vs " +
                          std::to_string(q.support.size()));
  }
  std::vector<std::size_t> pi = order_by_chunk_id(p);
  std::vector<std::size_t> qi = order_by_chunk_id(q);
  for (std::size_t i = 0; i < pi.size(); ++i) {
    if (p.support[pi[i]] != q.support[qi[i]]) {
      throw SupportMismatch("supports differ at sorted position " +
                            std::to_string(i));
    }
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < pi.size(); ++i) {
    double pp = p.probs[pi[i]];
    double qq = q.probs[qi[i]];
    if (pp > 0.0) acc += pp * std::log(pp / qq);
  }
  return acc;
}

}  // namespace invar
