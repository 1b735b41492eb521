#include "invar/invariance.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "invar/remote.hpp"

namespace invar {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Rewriters
// ---------------------------------------------------------------------------

std::string BuiltinRewriter::rewrite(const std::string& query) const {
  std::vector<std::string> tokens = tokenize(query);
  std::erase_if(tokens, [](const std::string& tok) {
    return tok == "a" || tok == "an" || tok == "the";
  });
  if (tokens.size() >= 2) {
    std::rotate(tokens.begin(), tokens.begin() + 1, tokens.end());
  }
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

RemoteRewriter::RemoteRewriter(std::string endpoint)
    : endpoint_(std::move(endpoint)) {
  if (endpoint_.empty()) throw Error("remote rewriter needs an endpoint");
}

std::string RemoteRewriter::rewrite(const std::string& query) const {
  try {
    json response = remote::post_json(endpoint_, {{"query", query}});
    if (!response.contains("rewritten") || !response["rewritten"].is_string()) {
      throw RemoteProtocolError("rewriter response missing rewritten string");
    }
    return response["rewritten"].get<std::string>();
  } catch (const RewriterFailure&) {
    throw;
  } catch (const Error& e) {
    throw RewriterFailure(std::string("remote rewriter failed: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Grid construction
// ---------------------------------------------------------------------------

ProvenanceMap invert_provenance(const ProvenanceMap& provenance,
                                std::size_t base_size) {
  ProvenanceMap inverse(base_size);
  for (std::size_t derived = 0; derived < provenance.size(); ++derived) {
    for (ChunkId base_id : provenance[derived]) {
      inverse.at(base_id).push_back(static_cast<ChunkId>(derived));
    }
  }
  return inverse;
}

InterventionGrid build_grid(const std::string& query,
                            const QueryRewriter& rewriter,
                            std::shared_ptr<const Corpus> base,
                            std::shared_ptr<const Corpus> resized,
                            std::shared_ptr<const ProvenanceMap> provenance,
                            double factor) {
  if (!base || !resized || !provenance) {
    throw Error("build_grid needs base, resized, and provenance");
  }
  InterventionGrid grid;
  grid.base_query = query;
  grid.resize_factor = factor;
  grid.base_corpus = std::move(base);
  grid.resized_corpus = std::move(resized);
  grid.provenance = provenance;
  grid.inverse_provenance = std::make_shared<const ProvenanceMap>(
      invert_provenance(*provenance, grid.base_corpus->size()));
  try {
    grid.rewritten_query = rewriter.rewrite(query);
  } catch (const RewriterFailure&) {
    grid.rewritten_query = BuiltinRewriter().rewrite(query);
    grid.rewriter_fell_back = true;
  }
  return grid;
}

InterventionGrid build_grid(const std::string& query,
                            const QueryRewriter& rewriter,
                            std::shared_ptr<const Corpus> base,
                            double factor) {
  if (!base) throw Error("build_grid needs a base corpus");
  ResizeResult resized = resize_corpus(*base, factor);
  return build_grid(
      query, rewriter, base,
      std::make_shared<const Corpus>(std::move(resized.corpus)),
      std::make_shared<const ProvenanceMap>(std::move(resized.provenance)),
      factor);
}

// ---------------------------------------------------------------------------
// Cell scoring
// ---------------------------------------------------------------------------

namespace {

struct CellContext {
  const Embedding* vq = nullptr;
  const std::string* query_text = nullptr;
  const EmbeddingMatrix* coarse = nullptr;
  const EmbeddingMatrix* llm = nullptr;
  const ChunkTextMap* texts = nullptr;
  bool resized = false;
};

CellContext cell_context(const GridCell& cell, const InterventionGrid& grid,
                         const GridEmbeddings& embeddings) {
  CellContext ctx;
  ctx.resized = cell.resized_corpus;
  ctx.vq = cell.rewritten_query ? &embeddings.vq_rewritten
                                : &embeddings.vq_base;
  ctx.query_text =
      cell.rewritten_query ? &grid.rewritten_query : &grid.base_query;
  if (cell.resized_corpus) {
    ctx.coarse = embeddings.coarse_resized.get();
    ctx.llm = embeddings.llm_resized.get();
    ctx.texts = embeddings.texts_resized.get();
  } else {
    ctx.coarse = embeddings.coarse_base.get();
    ctx.llm = embeddings.llm_base.get();
    ctx.texts = embeddings.texts_base.get();
  }
  if (ctx.coarse == nullptr || ctx.llm == nullptr || ctx.texts == nullptr) {
    throw Error("grid embeddings missing a corpus variant");
  }
  return ctx;
}

double pool_value(Pooling pooling, double current, double incoming,
                  bool first) {
  if (first) return incoming;
  return pooling == Pooling::Max ? std::max(current, incoming)
                                 : current + incoming;
}

}  // namespace

LSRTable score_grid(const InterventionGrid& grid, const std::string& answer,
                    const LmOracle& oracle, const GridEmbeddings& embeddings,
                    const AdapterParams& params, std::size_t k, double tau,
                    Pooling pooling) {
  if (k == 0) throw Error("score_grid needs k >= 1");
  LSRTable table;
  table.tau = tau;
  for (std::size_t c = 0; c < kGridCells.size(); ++c) {
    CellContext ctx = cell_context(kGridCells[c], grid, embeddings);
    CellScores& cell = table.cells[c];

    std::vector<std::pair<ChunkId, double>> scored =
        adapted_ranking(*ctx.vq, *ctx.coarse, params);
    RelevanceDistribution rel = renormalize_topk(scored, k);
    cell.native_ids = rel.support;
    cell.relevance = rel.probs;
    try {
      cell.lsr = lsr_scores(oracle, *ctx.query_text, answer, cell.native_ids,
                            *ctx.texts, tau);
    } catch (const Error& e) {
      throw Error("grid cell " + std::to_string(c) + ": " + e.what());
    }

    if (!ctx.resized) {
      cell.base_ids = cell.native_ids;
      cell.base_relevance = cell.relevance;
      cell.base_lsr = cell.lsr;
      continue;
    }

    // Project onto base chunk ids through the overlap map.
    std::map<ChunkId, std::pair<double, double>> pooled;  // id -> (rel, lsr)
    for (std::size_t i = 0; i < cell.native_ids.size(); ++i) {
      const std::vector<ChunkId>& overlaps =
          grid.provenance->at(cell.native_ids[i]);
      for (ChunkId base_id : overlaps) {
        auto [it, inserted] = pooled.try_emplace(base_id, 0.0, 0.0);
        it->second.first = pool_value(pooling, it->second.first,
                                      cell.relevance[i], inserted);
        it->second.second =
            pool_value(pooling, it->second.second, cell.lsr[i], inserted);
      }
    }
    std::vector<std::pair<ChunkId, std::pair<double, double>>> ranked(
        pooled.begin(), pooled.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) {
                       if (a.second.first != b.second.first) {
                         return a.second.first > b.second.first;
                       }
                       return a.first < b.first;
                     });
    for (const auto& [base_id, scores] : ranked) {
      cell.base_ids.push_back(base_id);
      cell.base_relevance.push_back(scores.first);
      cell.base_lsr.push_back(scores.second);
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// Partition
// ---------------------------------------------------------------------------

PatternPartition partition_patterns(const LSRTable& table, std::size_t l,
                                    Aggregation aggregation) {
  const CellScores& base_cell = table.cells[0];
  std::size_t k = base_cell.base_ids.size();
  if (l == 0 || l >= k) {
    throw InvalidL("need 0 < l < k; got l=" + std::to_string(l) +
                   " with k=" + std::to_string(k));
  }

  std::vector<std::pair<ChunkId, double>> aggregates;
  aggregates.reserve(k);
  for (ChunkId id : base_cell.base_ids) {
    double agg = aggregation == Aggregation::Mean
                     ? 0.0
                     : std::numeric_limits<double>::infinity();
    for (const CellScores& cell : table.cells) {
      double value = 0.0;  // absent cells contribute 0
      auto it = std::find(cell.base_ids.begin(), cell.base_ids.end(), id);
      if (it != cell.base_ids.end()) {
        value = cell.base_lsr[static_cast<std::size_t>(
            it - cell.base_ids.begin())];
      }
      if (aggregation == Aggregation::Mean) {
        agg += value;
      } else {
        agg = std::min(agg, value);
      }
    }
    if (aggregation == Aggregation::Mean) {
      agg /= static_cast<double>(kGridCells.size());
    }
    aggregates.emplace_back(id, agg);
  }
  std::stable_sort(aggregates.begin(), aggregates.end(),
                   [](const auto& a, const auto& b) {
                     if (a.second != b.second) return a.second > b.second;
                     return a.first < b.first;
                   });

  PatternPartition partition;
  partition.l = l;
  partition.k = k;
  for (std::size_t i = 0; i < aggregates.size(); ++i) {
    (i < l ? partition.d_in : partition.d_var)
        .push_back(aggregates[i].first);
  }
  return partition;
}

// ---------------------------------------------------------------------------
// Invariance loss
// ---------------------------------------------------------------------------

namespace {

struct CellPool {
  PoolState pool;
  // base chunk id -> indices into pool.cands (one for base-corpus cells, the
  // overlapping resized chunks otherwise).
  std::map<ChunkId, std::vector<std::size_t>> slots;
  bool usable = false;
};

CellPool build_cell_pool(const GridCell& cell, const InterventionGrid& grid,
                         const GridEmbeddings& embeddings,
                         const AdapterParams& params,
                         const std::vector<ChunkId>& full_set, bool training,
                         std::uint64_t cell_seed) {
  CellPool out;
  CellContext ctx = cell_context(cell, grid, embeddings);

  std::vector<ChunkId> cell_ids;
  if (!ctx.resized) {
    cell_ids = full_set;
    for (std::size_t i = 0; i < full_set.size(); ++i) {
      out.slots[full_set[i]] = {i};
    }
  } else {
    std::set<ChunkId> uniq;
    for (ChunkId base_id : full_set) {
      for (ChunkId derived : grid.inverse_provenance->at(base_id)) {
        uniq.insert(derived);
      }
    }
    cell_ids.assign(uniq.begin(), uniq.end());
    std::map<ChunkId, std::size_t> position;
    for (std::size_t i = 0; i < cell_ids.size(); ++i) {
      position[cell_ids[i]] = i;
    }
    for (ChunkId base_id : full_set) {
      std::vector<std::size_t>& slot = out.slots[base_id];
      for (ChunkId derived : grid.inverse_provenance->at(base_id)) {
        slot.push_back(position[derived]);
      }
    }
  }
  if (cell_ids.empty()) return out;  // degenerate mapping; cell contributes 0

  std::vector<Embedding> coarse_rows;
  std::vector<Embedding> llm_rows;
  coarse_rows.reserve(cell_ids.size());
  llm_rows.reserve(cell_ids.size());
  for (ChunkId id : cell_ids) {
    coarse_rows.push_back(ctx.coarse->row(id));
    llm_rows.push_back(ctx.llm->row(id));
  }
  out.pool = make_pool_state(*ctx.vq, cell_ids, coarse_rows, llm_rows, params,
                             training, cell_seed);
  out.usable = true;
  return out;
}

// Pool indices for one subset of base ids, ascending and unique.
std::vector<std::size_t> subset_indices(const CellPool& cell,
                                        const std::vector<ChunkId>& members) {
  std::vector<std::size_t> idx;
  for (ChunkId id : members) {
    auto it = cell.slots.find(id);
    if (it == cell.slots.end()) continue;
    idx.insert(idx.end(), it->second.begin(), it->second.end());
  }
  std::sort(idx.begin(), idx.end());
  idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
  return idx;
}

struct SubsetPlan {
  // members[s] = d_in plus the chosen d_var elements, by base id.
  std::vector<std::vector<ChunkId>> members;
};

SubsetPlan plan_subsets(const PatternPartition& partition,
                        const InvarianceConfig& cfg) {
  std::vector<ChunkId> var_sorted = partition.d_var;
  std::sort(var_sorted.begin(), var_sorted.end());
  SubsetPlan plan;
  bool exhaustive = cfg.exhaustive && var_sorted.size() <= 8;
  if (exhaustive) {
    std::size_t n = std::size_t{1} << var_sorted.size();
    plan.members.resize(n);
    for (std::size_t mask = 0; mask < n; ++mask) {
      std::vector<ChunkId>& m = plan.members[mask];
      m = partition.d_in;
      for (std::size_t i = 0; i < var_sorted.size(); ++i) {
        if ((mask >> i) & 1u) m.push_back(var_sorted[i]);
      }
    }
  } else {
    if (cfg.subset_samples < 2) {
      throw Error("subset_samples must be >= 2 when sampling");
    }
    SplitMix64 rng(cfg.subset_seed);
    plan.members.resize(cfg.subset_samples);
    for (std::vector<ChunkId>& m : plan.members) {
      m = partition.d_in;
      for (ChunkId id : var_sorted) {
        if (rng.uniform() < 0.5) m.push_back(id);
      }
    }
  }
  return plan;
}

InvarianceGradResult invariance_core(const PatternPartition& partition,
                                     const InterventionGrid& grid,
                                     const GridEmbeddings& embeddings,
                                     const AdapterParams& params,
                                     const InvarianceConfig& cfg,
                                     bool want_grad, bool training,
                                     std::uint64_t step_seed, unsigned jobs) {
  InvarianceGradResult result;
  if (want_grad) result.grad = AdapterGrad::zeros_like(params);
  if (partition.d_var.empty()) {
    result.empty_variant = true;
    return result;
  }

  std::vector<ChunkId> full_set = partition.d_in;
  full_set.insert(full_set.end(), partition.d_var.begin(),
                  partition.d_var.end());
  std::sort(full_set.begin(), full_set.end());

  std::array<CellPool, 4> pools;
  for (std::size_t c = 0; c < kGridCells.size(); ++c) {
    pools[c] = build_cell_pool(kGridCells[c], grid, embeddings, params,
                               full_set, training,
                               mix_seed(step_seed, c));
  }

  SubsetPlan plan = plan_subsets(partition, cfg);
  std::size_t n = plan.members.size();

  std::vector<double> values(n);
  std::vector<AdapterGrad> grads;
  if (want_grad) {
    grads.assign(n, AdapterGrad::zeros_like(params));
  }
  parallel_for(n, jobs, [&](std::size_t s) {
    std::array<double, 4> cell_kl{0.0, 0.0, 0.0, 0.0};
    for (std::size_t c = 0; c < pools.size(); ++c) {
      if (!pools[c].usable) continue;
      std::vector<std::size_t> idx =
          subset_indices(pools[c], plan.members[s]);
      if (idx.empty()) continue;
      cell_kl[c] = pool_kl(pools[c].pool, params, idx,
                           want_grad ? &grads[s] : nullptr);
    }
    values[s] = pairwise_sum(cell_kl) / 4.0;
  });

  double mean = pairwise_sum(values) / static_cast<double>(n);
  result.value = population_variance(values);

  if (want_grad) {
    // d Var / d theta = (2/N) sum_s (x_s - mean) dx_s/d theta, and each
    // grads[s] currently holds 4 * dx_s (the un-averaged cell sum).
    for (std::size_t s = 0; s < n; ++s) {
      double w = 2.0 * (values[s] - mean) /
                 (static_cast<double>(n) * 4.0);
      if (w != 0.0) result.grad.add_scaled(grads[s], w);
    }
  }
  return result;
}

}  // namespace

double population_variance(std::span<const double> values) {
  if (values.empty()) return 0.0;
  double n = static_cast<double>(values.size());
  double mean = pairwise_sum(values) / n;
  std::vector<double> sq(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    double centered = values[i] - mean;
    sq[i] = centered * centered;
  }
  return pairwise_sum(sq) / n;
}

InvarianceResult invariance_loss(const PatternPartition& partition,
                                 const InterventionGrid& grid,
                                 const GridEmbeddings& embeddings,
                                 const AdapterParams& params,
                                 const InvarianceConfig& cfg, unsigned jobs) {
  InvarianceGradResult full = invariance_core(
      partition, grid, embeddings, params, cfg, false, false, 0, jobs);
  return {full.value, full.empty_variant};
}

InvarianceGradResult invariance_loss_grad(const PatternPartition& partition,
                                          const InterventionGrid& grid,
                                          const GridEmbeddings& embeddings,
                                          const AdapterParams& params,
                                          const InvarianceConfig& cfg,
                                          bool training,
                                          std::uint64_t step_seed,
                                          unsigned jobs) {
  return invariance_core(partition, grid, embeddings, params, cfg, true,
                         training, step_seed, jobs);
}

double total_loss(double rl, double invar, double lambda) {
  if (!std::isfinite(rl) || !std::isfinite(invar)) {
    throw Error("total_loss needs finite inputs");
  }
  if (lambda < 0.0) throw Error("lambda must be non-negative");
  return rl + lambda * invar;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

json variance_report(const InterventionGrid& grid, const LSRTable& table) {
  auto top5 = [](const CellScores& cell) {
    std::set<ChunkId> out;
    for (std::size_t i = 0; i < cell.base_ids.size() && i < 5; ++i) {
      out.insert(cell.base_ids[i]);
    }
    return out;
  };
  std::set<ChunkId> base_top5 = top5(table.cells[0]);

  json cells = json::array();
  for (std::size_t c = 0; c < kGridCells.size(); ++c) {
    const CellScores& cell = table.cells[c];
    std::set<ChunkId> cell_top5 = top5(cell);
    std::vector<ChunkId> sym_diff;
    std::set_symmetric_difference(base_top5.begin(), base_top5.end(),
                                  cell_top5.begin(), cell_top5.end(),
                                  std::back_inserter(sym_diff));
    json triples = json::array();
    for (std::size_t i = 0; i < cell.base_ids.size(); ++i) {
      triples.push_back({{"chunk_id", cell.base_ids[i]},
                         {"relevance", cell.base_relevance[i]},
                         {"lsr", cell.base_lsr[i]}});
    }
    cells.push_back(
        {{"query_variant", kGridCells[c].rewritten_query ? "rewritten" : "base"},
         {"corpus_variant", kGridCells[c].resized_corpus ? "resized" : "base"},
         {"churn", sym_diff.size()},
         {"triples", triples}});
  }
  return json{{"schema", 1},
              {"query", grid.base_query},
              {"rewritten_query", grid.rewritten_query},
              {"rewriter_fell_back", grid.rewriter_fell_back},
              {"resize_factor", grid.resize_factor},
              {"tau", table.tau},
              {"cells", cells}};
}

}  // namespace invar
