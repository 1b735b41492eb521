// Run configuration: a sectioned key=value text file covering every stage
// (corpus, providers, oracle, rewriter, training, invariance, eval), a
// canonical rendering whose FNV-1a hash stamps all output artifacts, and
// environment-variable endpoint overrides.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "invar/embedding.hpp"
#include "invar/invariance.hpp"
#include "invar/lm_oracle.hpp"
#include "invar/trainer.hpp"

namespace invar {

enum class RewriterKind { Builtin, Identity, Remote };

struct RewriterSpec {
  RewriterKind kind = RewriterKind::Builtin;
  std::string endpoint;
};

struct RunConfig {
  std::uint64_t seed = 0;
  unsigned jobs = 0;

  // [corpus]
  std::string corpus_file;
  std::string gold_file;
  std::size_t window = 64;
  std::size_t stride = 32;

  // [embedding]; provider dims mirror `dim`
  std::size_t dim = 64;
  ProviderSpec coarse;
  ProviderSpec llm;

  OracleSpec oracle;
  RewriterSpec rewriter;

  // [train]; seed mirrors the run seed
  TrainConfig train;

  // [invariance]; l/k/lambda/tau mirror [train]
  InvarianceConfig invariance;

  // [eval]
  std::vector<int> eval_ks = {5, 20};
  std::size_t k_bar = 5;
  std::vector<std::string> distractors;  // extra answer candidates, '|'-split
};

// ConfigError on unknown sections or keys, bad values, or duplicate keys;
// messages carry the origin and line number.
RunConfig parse_config(std::string_view text, const std::string& origin);
RunConfig load_config(const std::string& path);

// Fixed section and key order, floats in shortest-exact form; hash input.
std::string render_config(const RunConfig& cfg);
std::string config_hash(const RunConfig& cfg);

// INVAR_EMBED_ENDPOINT (both provider endpoints), INVAR_ORACLE_ENDPOINT,
// INVAR_REWRITER_ENDPOINT; set variables win over file values.
void apply_env_overrides(RunConfig& cfg);

std::unique_ptr<QueryRewriter> make_rewriter(const RewriterSpec& spec);

}  // namespace invar
