#include "invar/alignment.hpp"

#include <algorithm>
#include <cmath>

namespace invar {

PoolState make_pool_state(const Embedding& vq, std::span<const ChunkId> ids,
                          std::span<const Embedding> coarse,
                          std::span<const Embedding> llm,
                          const AdapterParams& params, bool training,
                          std::uint64_t step_seed) {
  if (coarse.size() != ids.size() || llm.size() != ids.size()) {
    throw Error("pool slices must align with candidate ids");
  }
  PoolState pool;
  pool.vq = vq;
  if (params.side == AdapterSide::Query) {
    pool.query_fwd = apply_adapter_detailed(params, vq, training, step_seed);
  }
  pool.cands.resize(ids.size());
  for (std::size_t j = 0; j < ids.size(); ++j) {
    CandidateState& cand = pool.cands[j];
    cand.id = ids[j];
    cand.input = coarse[j];
    cand.target_score = dot(vq, llm[j]);
    if (params.side == AdapterSide::Document) {
      cand.fwd = apply_adapter_detailed(params, coarse[j], training,
                                        mix_seed(step_seed, ids[j]));
      cand.adapted_score = dot(vq, cand.fwd.out);
    } else {
      cand.adapted_score = dot(pool.query_fwd.out, coarse[j]);
    }
  }
  return pool;
}

namespace {

struct LogSoftmax {
  std::vector<double> logp;
  std::vector<double> p;
};

LogSoftmax log_softmax(std::span<const double> scores) {
  double max_score = scores[0];
  for (double s : scores) max_score = std::max(max_score, s);
  double denom = 0.0;
  for (double s : scores) denom += std::exp(s - max_score);
  double log_denom = std::log(denom);
  LogSoftmax out;
  out.logp.resize(scores.size());
  out.p.resize(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out.logp[i] = scores[i] - max_score - log_denom;
    out.p[i] = std::exp(out.logp[i]);
  }
  return out;
}

// Pushes a gradient seated at the adapter output back onto (A, B).
// g_hat is dL/du (already through the normalization Jacobian); input is the
// adapter's input vector; fwd the matching forward record.
void backprop_low_rank(const AdapterParams& params, const AdapterForward& fwd,
                       const Embedding& input, std::span<const double> g_hat,
                       AdapterGrad& grad) {
  std::size_t d = params.dim;
  std::size_t r = params.rank;
  double ratio = params.alpha / static_cast<double>(r);

  std::vector<double> e(d);
  for (std::size_t c = 0; c < d; ++c) e[c] = ratio * fwd.mask[c] * g_hat[c];

  for (std::size_t c = 0; c < d; ++c) {
    if (e[c] == 0.0) continue;
    double* db_row = grad.dB.data() + c * r;
    for (std::size_t row = 0; row < r; ++row) {
      db_row[row] += e[c] * fwd.z[row];
    }
  }

  std::vector<double> bt_e(r, 0.0);
  for (std::size_t c = 0; c < d; ++c) {
    if (e[c] == 0.0) continue;
    const double* b_row = params.B.data() + c * r;
    for (std::size_t row = 0; row < r; ++row) {
      bt_e[row] += b_row[row] * e[c];
    }
  }
  for (std::size_t row = 0; row < r; ++row) {
    if (bt_e[row] == 0.0) continue;
    double* da_row = grad.dA.data() + row * d;
    for (std::size_t c = 0; c < d; ++c) {
      da_row[c] += bt_e[row] * input.values[c];
    }
  }
}

}  // namespace

double pool_kl(const PoolState& pool, const AdapterParams& params,
               std::span<const std::size_t> subset, AdapterGrad* grad_out) {
  if (subset.empty()) throw Error("pool_kl needs a non-empty subset");
  std::vector<double> s(subset.size());
  std::vector<double> t(subset.size());
  for (std::size_t i = 0; i < subset.size(); ++i) {
    const CandidateState& cand = pool.cands.at(subset[i]);
    s[i] = cand.adapted_score;
    t[i] = cand.target_score;
  }
  LogSoftmax ps = log_softmax(s);
  LogSoftmax qs = log_softmax(t);

  std::vector<double> terms(subset.size());
  for (std::size_t i = 0; i < subset.size(); ++i) {
    terms[i] = ps.p[i] * (ps.logp[i] - qs.logp[i]);
  }
  double loss = pairwise_sum(terms);
  if (grad_out == nullptr) return loss;

  // dL/ds_i for KL(p||q) with q constant.
  std::vector<double> g_score(subset.size());
  for (std::size_t i = 0; i < subset.size(); ++i) {
    g_score[i] = ps.p[i] * ((ps.logp[i] - qs.logp[i]) - loss);
  }

  std::size_t d = params.dim;
  if (params.side == AdapterSide::Document) {
    std::vector<double> g_hat(d);
    for (std::size_t i = 0; i < subset.size(); ++i) {
      if (g_score[i] == 0.0) continue;
      const CandidateState& cand = pool.cands[subset[i]];
      // (I - v'v'^T) vq / |u|, scaled by the score gradient; v'.vq is the
      // adapted score itself.
      for (std::size_t c = 0; c < d; ++c) {
        g_hat[c] = g_score[i] *
                   (pool.vq.values[c] -
                    cand.adapted_score * cand.fwd.out.values[c]) /
                   cand.fwd.u_norm;
      }
      backprop_low_rank(params, cand.fwd, cand.input, g_hat, *grad_out);
    }
  } else {
    // All score gradients meet at the single adapted query vector.
    std::vector<double> g_sum(d, 0.0);
    for (std::size_t i = 0; i < subset.size(); ++i) {
      if (g_score[i] == 0.0) continue;
      const CandidateState& cand = pool.cands[subset[i]];
      for (std::size_t c = 0; c < d; ++c) {
        g_sum[c] += g_score[i] * cand.input.values[c];
      }
    }
    const AdapterForward& fwd = pool.query_fwd;
    double proj = dot(std::span<const double>(g_sum),
                      std::span<const double>(fwd.out.values));
    std::vector<double> g_hat(d);
    for (std::size_t c = 0; c < d; ++c) {
      g_hat[c] = (g_sum[c] - proj * fwd.out.values[c]) / fwd.u_norm;
    }
    backprop_low_rank(params, fwd, pool.vq, g_hat, *grad_out);
  }
  return loss;
}

std::vector<std::pair<ChunkId, double>> adapted_ranking(
    const Embedding& vq, const EmbeddingMatrix& coarse,
    const AdapterParams& params) {
  if (vq.dim() != coarse.dim || params.dim != coarse.dim) {
    throw DimMismatch("query/matrix/adapter dims disagree");
  }
  std::vector<std::pair<ChunkId, double>> scored(coarse.size());
  if (params.side == AdapterSide::Document) {
    for (std::size_t i = 0; i < coarse.size(); ++i) {
      Embedding adapted = apply_adapter(params, coarse.rows[i]);
      scored[i] = {static_cast<ChunkId>(i), dot(vq, adapted)};
    }
  } else {
    Embedding adapted_q = apply_adapter(params, vq);
    for (std::size_t i = 0; i < coarse.size(); ++i) {
      scored[i] = {static_cast<ChunkId>(i), dot(adapted_q, coarse.rows[i])};
    }
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  return scored;
}

AlignmentBatch build_batch(const Embedding& vq, const EmbeddingMatrix& coarse,
                           const EmbeddingMatrix& llm,
                           const AdapterParams& params, std::size_t k,
                           const std::string& query_id) {
  if (k < 2) throw Error("build_batch needs k >= 2");
  if (coarse.size() < 2) {
    throw CorpusTooSmall("need at least 2 chunks, have " +
                         std::to_string(coarse.size()));
  }
  if (coarse.size() != llm.size()) {
    throw Error("coarse and llm matrices must cover the same chunks");
  }
  if (coarse.dim != llm.dim) {
    throw DimMismatch("coarse and llm dims disagree");
  }

  // Adapted scores on the inference path pick the candidates; selection is
  // frozen per batch.
  std::vector<std::pair<ChunkId, double>> scored =
      adapted_ranking(vq, coarse, params);
  std::size_t take = std::min(k, scored.size());

  AlignmentBatch batch;
  batch.query_id = query_id;
  batch.vq = vq;
  batch.candidate_ids.reserve(take);
  batch.coarse.reserve(take);
  batch.llm.reserve(take);
  for (std::size_t i = 0; i < take; ++i) {
    ChunkId id = scored[i].first;
    batch.candidate_ids.push_back(id);
    batch.coarse.push_back(coarse.row(id));
    batch.llm.push_back(llm.row(id));
  }
  return batch;
}

namespace {

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return idx;
}

}  // namespace

double rl_loss(const AlignmentBatch& batch, const AdapterParams& params,
               bool training, std::uint64_t step_seed) {
  PoolState pool = make_pool_state(batch.vq, batch.candidate_ids, batch.coarse,
                                   batch.llm, params, training, step_seed);
  std::vector<std::size_t> idx = all_indices(pool.cands.size());
  return pool_kl(pool, params, idx, nullptr);
}

RlLossGrad rl_loss_grad(const AlignmentBatch& batch,
                        const AdapterParams& params, bool training,
                        std::uint64_t step_seed) {
  PoolState pool = make_pool_state(batch.vq, batch.candidate_ids, batch.coarse,
                                   batch.llm, params, training, step_seed);
  std::vector<std::size_t> idx = all_indices(pool.cands.size());
  RlLossGrad out;
  out.grad = AdapterGrad::zeros_like(params);
  out.loss = pool_kl(pool, params, idx, &out.grad);
  return out;
}

double rl_loss_corpus(std::span<const AlignmentBatch> batches,
                      const AdapterParams& params) {
  if (batches.empty()) throw EmptyQuerySet("rl_loss_corpus needs queries");
  std::vector<double> losses(batches.size());
  for (std::size_t i = 0; i < batches.size(); ++i) {
    losses[i] = rl_loss(batches[i], params);
  }
  return pairwise_sum(losses) / static_cast<double>(batches.size());
}

}  // namespace invar
