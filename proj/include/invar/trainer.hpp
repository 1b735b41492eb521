// Gradient-descent loop over the adapter: per-query alignment gradients plus
// the weighted invariance penalty, cosine or constant learning rate,
// checkpointing, and deterministic resume.
//
// Determinism contract: every random draw is a pure function of (cfg.seed,
// step, query index). The epoch permutation is Fisher-Yates seeded by
// mix_seed(mix_seed(seed, kEpochTag), epoch); the dropout stream for query q
// at step s is seeded by mix_seed(mix_seed(seed, s+1), q+1); sampled
// invariance subsets reseed per (step, query) from that same value. Worker
// count never changes results.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "invar/alignment.hpp"
#include "invar/invariance.hpp"

namespace invar {

enum class LrSchedule : std::uint8_t { Cosine = 0, Constant = 1 };

struct TrainConfig {
  double lr0 = 1e-2;
  int steps = 0;
  int batch_size = 64;
  LrSchedule schedule = LrSchedule::Cosine;
  int k = 16;            // alignment candidates per query
  int l = 4;             // invariant-pattern size; must stay below k
  double lambda = 1.0;   // invariance weight
  double tau = 1.0;      // LSR temperature
  std::uint64_t seed = 0;
  int eval_every = 100;  // checkpoint cadence in steps
  int rank = 16;
  double alpha = 32.0;
  double dropout_p = 0.05;
  double momentum = 0.0;  // 0 = plain gradient descent
  AdapterSide side = AdapterSide::Document;
};

void validate_train_config(const TrainConfig& cfg);

// FNV-1a over a canonical key=value rendering; resume refuses a mismatch.
std::string train_config_hash(const TrainConfig& cfg);

double lr_at(const TrainConfig& cfg, int step);

struct LossRow {
  int step = 0;  // 1-based count of completed steps
  double rl = 0.0;
  double invar = 0.0;
  double total = 0.0;
};

struct TrainState {
  int step = 0;  // completed steps
  AdapterParams params;
  double lr = 0.0;  // schedule value at `step`
  std::vector<LossRow> loss_history;
  std::uint64_t rng_cursor = 0;  // equals step; all streams derive from it
  // Divergence guard bookkeeping, carried across resume.
  double initial_total = 0.0;
  int diverge_run = 0;
  // Momentum velocities; kept only when cfg.momentum > 0.
  std::vector<double> velocity_a;
  std::vector<double> velocity_b;
};

struct TrainQuery {
  std::string query_id;
  std::string text;
  Embedding vq;  // coarse-space query embedding
  // Invariance artifacts, frozen at setup time with the initial adapter
  // (B = 0, so setup retrieval equals raw-score retrieval). Null when the
  // run trains with lambda = 0.
  std::shared_ptr<const InterventionGrid> grid;
  std::shared_ptr<const GridEmbeddings> embeddings;
  PatternPartition partition;
};

struct TrainSetup {
  std::shared_ptr<const EmbeddingMatrix> coarse;
  std::shared_ptr<const EmbeddingMatrix> llm;
  std::vector<TrainQuery> queries;
  InvarianceConfig invariance;  // l/k/lambda/tau mirrored from TrainConfig
  unsigned jobs = 0;            // 0 = hardware default
};

struct StepRecord {
  int step = 0;
  double rl = 0.0;
  double invar = 0.0;
  double total = 0.0;
  double lr = 0.0;  // rate used for this step's update
};

using StepCallback = std::function<void(const StepRecord&)>;

// Runs from state.step to cfg.steps. out_dir empty disables checkpointing;
// otherwise ckpt_<step>.ivad + state_<step>.json land there every
// cfg.eval_every steps and at the end.
TrainState train(const TrainConfig& cfg, const TrainSetup& setup,
                 TrainState state, const std::string& out_dir = "",
                 const StepCallback& on_step = nullptr);

// Fresh run: initializes the adapter from cfg and trains from step 0.
TrainState train(const TrainConfig& cfg, const TrainSetup& setup,
                 const std::string& out_dir = "",
                 const StepCallback& on_step = nullptr);

// state_path names a state_<step>.json; the matching ckpt_<step>.ivad must
// sit next to it.
TrainState resume(const std::string& state_path, const TrainConfig& cfg);

void save_checkpoint(const TrainConfig& cfg, const TrainState& state,
                     const std::string& out_dir);

}  // namespace invar
