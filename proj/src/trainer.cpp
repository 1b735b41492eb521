#include "invar/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "json.hpp"

namespace invar {

using nlohmann::json;

namespace {

constexpr std::uint64_t kEpochTag = 0x45504F43;   // epoch-permutation stream
constexpr std::uint64_t kSubsetTag = 0x53554253;  // sampled-subset stream
constexpr int kHistoryTail = 50;
constexpr int kDivergeLimit = 50;

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed,
                                           std::uint64_t epoch) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  SplitMix64 rng(mix_seed(mix_seed(seed, kEpochTag), epoch));
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.next() % i);
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

json state_to_json(const TrainConfig& cfg, const TrainState& state) {
  json history = json::array();
  std::size_t start = state.loss_history.size() > kHistoryTail
                          ? state.loss_history.size() - kHistoryTail
                          : 0;
  for (std::size_t i = start; i < state.loss_history.size(); ++i) {
    const LossRow& row = state.loss_history[i];
    history.push_back({row.step, row.rl, row.invar, row.total});
  }
  json out{{"schema", 1},
           {"config_hash", train_config_hash(cfg)},
           {"step", state.step},
           {"lr", state.lr},
           {"rng_cursor", state.rng_cursor},
           {"initial_total", state.initial_total},
           {"diverge_run", state.diverge_run},
           {"loss_history", history}};
  if (cfg.momentum > 0.0) {
    out["velocity_a"] = state.velocity_a;
    out["velocity_b"] = state.velocity_b;
  }
  return out;
}

struct QueryResult {
  double rl = 0.0;
  double invar = 0.0;
  AdapterGrad grad;
};

}  // namespace

void validate_train_config(const TrainConfig& cfg) {
  if (cfg.lr0 <= 0.0) throw Error("lr0 must be positive");
  if (cfg.steps <= 0) throw Error("steps must be positive");
  if (cfg.batch_size <= 0) throw Error("batch_size must be positive");
  if (cfg.k < 2) throw Error("k must be at least 2");
  if (cfg.l < 1 || cfg.l >= cfg.k) throw Error("need 0 < l < k");
  if (cfg.lambda < 0.0) throw Error("lambda must be non-negative");
  if (cfg.tau <= 0.0) throw Error("tau must be positive");
  if (cfg.eval_every <= 0) throw Error("eval_every must be positive");
  if (cfg.rank <= 0) throw Error("rank must be positive");
  if (cfg.alpha <= 0.0) throw Error("alpha must be positive");
  if (cfg.dropout_p < 0.0 || cfg.dropout_p >= 1.0) {
    throw Error("dropout_p must lie in [0, 1)");
  }
  if (cfg.momentum < 0.0 || cfg.momentum >= 1.0) {
    throw Error("momentum must lie in [0, 1)");
  }
}

std::string train_config_hash(const TrainConfig& cfg) {
  std::string canon;
  canon += "lr0=" + fmt_double(cfg.lr0);
  canon += "\nsteps=" + std::to_string(cfg.steps);
  canon += "\nbatch_size=" + std::to_string(cfg.batch_size);
  canon += "\nschedule=";
  canon += cfg.schedule == LrSchedule::Cosine ? "cosine" : "constant";
  canon += "\nk=" + std::to_string(cfg.k);
  canon += "\nl=" + std::to_string(cfg.l);
  canon += "\nlambda=" + fmt_double(cfg.lambda);
  canon += "\ntau=" + fmt_double(cfg.tau);
  canon += "\nseed=" + std::to_string(cfg.seed);
  canon += "\neval_every=" + std::to_string(cfg.eval_every);
  canon += "\nrank=" + std::to_string(cfg.rank);
  canon += "\nalpha=" + fmt_double(cfg.alpha);
  canon += "\ndropout_p=" + fmt_double(cfg.dropout_p);
  canon += "\nmomentum=" + fmt_double(cfg.momentum);
  canon += "\nside=";
  canon += cfg.side == AdapterSide::Document ? "document" : "query";
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(canon)));
  return buf;
}

double lr_at(const TrainConfig& cfg, int step) {
  if (step < 0 || step > cfg.steps) {
    throw StepOutOfRange("step " + std::to_string(step) +
                         " outside [0, " + std::to_string(cfg.steps) + "]");
  }
  if (cfg.schedule == LrSchedule::Constant || cfg.steps == 0) return cfg.lr0;
  double phase = std::numbers::pi * static_cast<double>(step) /
                 static_cast<double>(cfg.steps);
  return cfg.lr0 * 0.5 * (1.0 + std::cos(phase));
}

void save_checkpoint(const TrainConfig& cfg, const TrainState& state,
                     const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
  std::string tag = std::to_string(state.step);
  save_adapter(state.params, (fs::path(out_dir) / ("ckpt_" + tag + ".ivad")).string());
  fs::path state_path = fs::path(out_dir) / ("state_" + tag + ".json");
  std::ofstream out(state_path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + state_path.string());
  out << state_to_json(cfg, state).dump(2) << '\n';
  if (!out) throw IoError("write failed: " + state_path.string());
}

TrainState train(const TrainConfig& cfg, const TrainSetup& setup,
                 TrainState state, const std::string& out_dir,
                 const StepCallback& on_step) {
  validate_train_config(cfg);
  if (!setup.coarse || !setup.llm) throw Error("train needs both matrices");
  if (setup.queries.empty()) throw EmptyQuerySet("no training queries");
  for (const TrainQuery& tq : setup.queries) {
    if (tq.vq.dim() != setup.coarse->dim) {
      throw DimMismatch("query embedding dim mismatch");
    }
    if (cfg.lambda > 0.0 && (!tq.grid || !tq.embeddings)) {
      throw Error("lambda > 0 needs invariance artifacts for every query");
    }
  }
  const bool training_mode = cfg.dropout_p > 0.0;
  const std::size_t n_queries = setup.queries.size();
  const std::size_t batches_per_epoch =
      (n_queries + static_cast<std::size_t>(cfg.batch_size) - 1) /
      static_cast<std::size_t>(cfg.batch_size);

  if (cfg.momentum > 0.0 && state.velocity_a.empty()) {
    state.velocity_a.assign(state.params.A.size(), 0.0);
    state.velocity_b.assign(state.params.B.size(), 0.0);
  }

  for (int s = state.step; s < cfg.steps; ++s) {
    std::uint64_t epoch = static_cast<std::uint64_t>(s) / batches_per_epoch;
    std::size_t batch_index =
        static_cast<std::size_t>(s) % batches_per_epoch;
    std::vector<std::size_t> perm =
        epoch_permutation(n_queries, cfg.seed, epoch);
    std::size_t lo = batch_index * static_cast<std::size_t>(cfg.batch_size);
    std::size_t hi = std::min(
        n_queries, lo + static_cast<std::size_t>(cfg.batch_size));
    std::vector<std::size_t> batch(perm.begin() + static_cast<std::ptrdiff_t>(lo),
                                   perm.begin() + static_cast<std::ptrdiff_t>(hi));
    const std::size_t bs = batch.size();
    double lr = lr_at(cfg, s);

    std::vector<QueryResult> slots(bs);
    parallel_for(bs, setup.jobs, [&](std::size_t i) {
      const TrainQuery& tq = setup.queries[batch[i]];
      std::uint64_t step_seed =
          mix_seed(mix_seed(cfg.seed, static_cast<std::uint64_t>(s) + 1),
                   static_cast<std::uint64_t>(batch[i]) + 1);
      AlignmentBatch ab =
          build_batch(tq.vq, *setup.coarse, *setup.llm, state.params,
                      static_cast<std::size_t>(cfg.k), tq.query_id);
      RlLossGrad rg =
          rl_loss_grad(ab, state.params, training_mode, step_seed);
      QueryResult& slot = slots[i];
      slot.rl = rg.loss;
      slot.grad = std::move(rg.grad);
      if (cfg.lambda > 0.0) {
        InvarianceConfig icfg = setup.invariance;
        icfg.subset_seed = mix_seed(step_seed, kSubsetTag);
        InvarianceGradResult ig = invariance_loss_grad(
            tq.partition, *tq.grid, *tq.embeddings, state.params, icfg,
            training_mode, step_seed, 1);
        slot.invar = ig.value;
        slot.grad.add_scaled(ig.grad, cfg.lambda);
      }
    });

    std::vector<double> rls(bs), invars(bs);
    std::vector<AdapterGrad> grads;
    grads.reserve(bs);
    for (std::size_t i = 0; i < bs; ++i) {
      rls[i] = slots[i].rl;
      invars[i] = slots[i].invar;
      grads.push_back(std::move(slots[i].grad));
    }
    double rl_mean = pairwise_sum(rls) / static_cast<double>(bs);
    double invar_mean = pairwise_sum(invars) / static_cast<double>(bs);
    double total = rl_mean + cfg.lambda * invar_mean;
    if (!std::isfinite(total)) {
      throw NonFiniteLoss(static_cast<std::size_t>(s) + 1);
    }

    if (s == 0) {
      state.initial_total = total;
      state.diverge_run = 0;
    } else if (total > 10.0 * state.initial_total) {
      if (++state.diverge_run >= kDivergeLimit) {
        throw DivergenceGuard(
            "total loss above 10x initial for " +
            std::to_string(kDivergeLimit) + " consecutive steps (step " +
            std::to_string(s + 1) + ")");
      }
    } else {
      state.diverge_run = 0;
    }

    AdapterGrad grad = reduce_grads(std::move(grads));
    double inv_bs = 1.0 / static_cast<double>(bs);
    if (cfg.momentum > 0.0) {
      for (std::size_t i = 0; i < grad.dA.size(); ++i) {
        state.velocity_a[i] =
            cfg.momentum * state.velocity_a[i] + grad.dA[i] * inv_bs;
        state.params.A[i] -= lr * state.velocity_a[i];
      }
      for (std::size_t i = 0; i < grad.dB.size(); ++i) {
        state.velocity_b[i] =
            cfg.momentum * state.velocity_b[i] + grad.dB[i] * inv_bs;
        state.params.B[i] -= lr * state.velocity_b[i];
      }
    } else {
      for (std::size_t i = 0; i < grad.dA.size(); ++i) {
        state.params.A[i] -= lr * grad.dA[i] * inv_bs;
      }
      for (std::size_t i = 0; i < grad.dB.size(); ++i) {
        state.params.B[i] -= lr * grad.dB[i] * inv_bs;
      }
    }

    state.step = s + 1;
    state.rng_cursor = static_cast<std::uint64_t>(s) + 1;
    state.lr = lr_at(cfg, s + 1);
    state.loss_history.push_back({s + 1, rl_mean, invar_mean, total});
    if (on_step) on_step({s + 1, rl_mean, invar_mean, total, lr});
    if (!out_dir.empty() &&
        ((s + 1) % cfg.eval_every == 0 || s + 1 == cfg.steps)) {
      save_checkpoint(cfg, state, out_dir);
    }
  }
  return state;
}

TrainState train(const TrainConfig& cfg, const TrainSetup& setup,
                 const std::string& out_dir, const StepCallback& on_step) {
  validate_train_config(cfg);
  if (!setup.coarse) throw Error("train needs a coarse matrix");
  TrainState state;
  state.params = init_adapter(setup.coarse->dim,
                              static_cast<std::size_t>(cfg.rank), cfg.alpha,
                              cfg.dropout_p, cfg.seed, cfg.side);
  state.lr = lr_at(cfg, 0);
  return train(cfg, setup, std::move(state), out_dir, on_step);
}

TrainState resume(const std::string& state_path, const TrainConfig& cfg) {
  validate_train_config(cfg);
  namespace fs = std::filesystem;
  std::ifstream in(state_path, std::ios::binary);
  if (!in) throw IoError("cannot open " + state_path);
  json parsed = json::parse(in, nullptr, false);
  if (parsed.is_discarded() || !parsed.is_object()) {
    throw CorruptCheckpoint("unparseable state file: " + state_path);
  }
  try {
    if (parsed.at("schema").get<int>() != 1) {
      throw CorruptCheckpoint("unsupported state schema");
    }
    if (parsed.at("config_hash").get<std::string>() !=
        train_config_hash(cfg)) {
      throw ConfigMismatch("checkpoint was written under a different config");
    }
    TrainState state;
    state.step = parsed.at("step").get<int>();
    state.lr = parsed.at("lr").get<double>();
    state.rng_cursor = parsed.at("rng_cursor").get<std::uint64_t>();
    state.initial_total = parsed.at("initial_total").get<double>();
    state.diverge_run = parsed.at("diverge_run").get<int>();
    for (const json& row : parsed.at("loss_history")) {
      state.loss_history.push_back({row.at(0).get<int>(),
                                    row.at(1).get<double>(),
                                    row.at(2).get<double>(),
                                    row.at(3).get<double>()});
    }
    fs::path ckpt = fs::path(state_path).parent_path() /
                    ("ckpt_" + std::to_string(state.step) + ".ivad");
    state.params = load_adapter(ckpt.string());
    if (state.params.rank != static_cast<std::size_t>(cfg.rank) ||
        state.params.seed != cfg.seed || state.params.side != cfg.side ||
        state.params.alpha != cfg.alpha ||
        state.params.dropout_p != cfg.dropout_p) {
      throw CorruptCheckpoint("adapter file disagrees with the state config");
    }
    if (cfg.momentum > 0.0) {
      state.velocity_a = parsed.at("velocity_a").get<std::vector<double>>();
      state.velocity_b = parsed.at("velocity_b").get<std::vector<double>>();
      if (state.velocity_a.size() != state.params.A.size() ||
          state.velocity_b.size() != state.params.B.size()) {
        throw CorruptCheckpoint("velocity shape mismatch");
      }
    }
    return state;
  } catch (const json::exception& e) {
    throw CorruptCheckpoint(std::string("state file missing fields: ") +
                            e.what());
  }
}

}  // namespace invar
