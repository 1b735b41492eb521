// Operator entry point: ingest -> train -> eval -> variance-report, each a
// thin wrapper over the library with fixed exit codes (0 ok, 2 usage or
// input, 3 numerical failure, 4 state mismatch).
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "invar/config.hpp"
#include "invar/generation.hpp"
#include "invar/metrics.hpp"
#include "invar/trainer.hpp"

namespace fs = std::filesystem;
using namespace invar;

namespace {

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    fn();
    return 0;
  } catch (const NonFiniteLoss& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const DivergenceGuard& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const ConfigMismatch& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const CorruptCheckpoint& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

std::string provider_tag(const ProviderSpec& spec) {
  switch (spec.kind) {
    case ProviderKind::Synthetic:
      return "synthetic:seed=" + std::to_string(spec.seed);
    case ProviderKind::Planted:
      return "planted:seed=" + std::to_string(spec.seed) +
             ":noise=" + fmt17(spec.noise);
    case ProviderKind::Remote:
      return "remote:" + spec.endpoint;
  }
  return "synthetic";
}

// Planted providers anchor every gold chunk at its query's text, so the gold
// rows line up with the query embedding by construction.
void plant_gold_anchors(EmbeddingProvider* provider, const Corpus& corpus,
                        const std::vector<GoldLabel>& gold) {
  auto* planted = dynamic_cast<PlantedProvider*>(provider);
  if (planted == nullptr) return;
  for (const GoldLabel& label : gold) {
    for (ChunkId id : label.gold_chunk_ids) {
      planted->plant(corpus.text_of(id), label.query);
    }
  }
}

struct Pipeline {
  RunConfig cfg;
  std::shared_ptr<const Corpus> corpus;
  std::vector<GoldLabel> gold;
  std::unique_ptr<EmbeddingProvider> coarse_provider;
  std::unique_ptr<EmbeddingProvider> llm_provider;
  std::shared_ptr<const EmbeddingMatrix> coarse;
  std::shared_ptr<const EmbeddingMatrix> llm;
  std::unique_ptr<LmOracle> oracle;
  std::unique_ptr<QueryRewriter> rewriter;
  std::vector<Embedding> query_vecs;  // coarse space, aligned with gold
};

Pipeline load_pipeline(const std::string& config_path, unsigned jobs_flag,
                       const std::string& gold_override = "") {
  Pipeline p;
  p.cfg = load_config(config_path);
  apply_env_overrides(p.cfg);
  if (jobs_flag > 0) p.cfg.jobs = jobs_flag;
  if (p.cfg.jobs > 0) set_default_jobs(p.cfg.jobs);
  if (p.cfg.corpus_file.empty()) {
    throw ConfigError("corpus_file is not set in [corpus]");
  }
  std::string gold_path =
      gold_override.empty() ? p.cfg.gold_file : gold_override;
  if (gold_path.empty()) throw ConfigError("gold_file is not set in [corpus]");
  p.corpus = std::make_shared<const Corpus>(load_corpus(p.cfg.corpus_file));
  p.gold = load_gold(gold_path);
  if (p.gold.empty()) throw EmptyQuerySet("gold file lists no queries");
  p.coarse_provider = make_provider(p.cfg.coarse);
  p.llm_provider = make_provider(p.cfg.llm);
  plant_gold_anchors(p.coarse_provider.get(), *p.corpus, p.gold);
  plant_gold_anchors(p.llm_provider.get(), *p.corpus, p.gold);
  p.coarse = std::make_shared<const EmbeddingMatrix>(
      embed_corpus(*p.coarse_provider, *p.corpus, provider_tag(p.cfg.coarse),
                   p.cfg.jobs));
  p.llm = std::make_shared<const EmbeddingMatrix>(embed_corpus(
      *p.llm_provider, *p.corpus, provider_tag(p.cfg.llm), p.cfg.jobs));
  p.oracle = make_oracle(p.cfg.oracle);
  p.rewriter = make_rewriter(p.cfg.rewriter);
  p.query_vecs.reserve(p.gold.size());
  for (const GoldLabel& label : p.gold) {
    p.query_vecs.push_back(p.coarse_provider->embed(label.query));
  }
  return p;
}

const std::string& answer_for(const GoldLabel& label) {
  if (label.gold_answers.empty()) {
    throw Error("query " + label.query_id +
                " has no gold answer; likelihood scoring needs one");
  }
  return label.gold_answers.front();
}

struct ResizedArtifacts {
  std::shared_ptr<const Corpus> corpus;
  std::shared_ptr<const ProvenanceMap> provenance;
  std::shared_ptr<const EmbeddingMatrix> coarse;
  std::shared_ptr<const EmbeddingMatrix> llm;
  std::shared_ptr<const ChunkTextMap> texts_base;
  std::shared_ptr<const ChunkTextMap> texts_resized;
};

ResizedArtifacts build_resized(const Pipeline& p) {
  ResizedArtifacts out;
  ResizeResult rr =
      resize_corpus(*p.corpus, p.cfg.invariance.resize_factor);
  out.corpus = std::make_shared<const Corpus>(std::move(rr.corpus));
  out.provenance =
      std::make_shared<const ProvenanceMap>(std::move(rr.provenance));
  out.coarse = std::make_shared<const EmbeddingMatrix>(
      embed_corpus(*p.coarse_provider, *out.corpus,
                   provider_tag(p.cfg.coarse), p.cfg.jobs));
  out.llm = std::make_shared<const EmbeddingMatrix>(
      embed_corpus(*p.llm_provider, *out.corpus, provider_tag(p.cfg.llm),
                   p.cfg.jobs));
  out.texts_base =
      std::make_shared<const ChunkTextMap>(chunk_texts(*p.corpus));
  out.texts_resized =
      std::make_shared<const ChunkTextMap>(chunk_texts(*out.corpus));
  return out;
}

// Grid, embeddings, and partition for one query, scored with the given
// adapter (training freezes these at the initial adapter).
void attach_invariance(const Pipeline& p, const ResizedArtifacts& rs,
                       const GoldLabel& label, const Embedding& vq,
                       const AdapterParams& params, TrainQuery& tq) {
  auto grid = std::make_shared<const InterventionGrid>(
      build_grid(label.query, *p.rewriter, p.corpus, rs.corpus,
                 rs.provenance, p.cfg.invariance.resize_factor));
  auto ge = std::make_shared<GridEmbeddings>();
  ge->vq_base = vq;
  ge->vq_rewritten = p.coarse_provider->embed(grid->rewritten_query);
  ge->coarse_base = p.coarse;
  ge->llm_base = p.llm;
  ge->coarse_resized = rs.coarse;
  ge->llm_resized = rs.llm;
  ge->texts_base = rs.texts_base;
  ge->texts_resized = rs.texts_resized;
  LSRTable table =
      score_grid(*grid, answer_for(label), *p.oracle, *ge, params,
                 p.cfg.invariance.k, p.cfg.invariance.tau,
                 p.cfg.invariance.pooling);
  tq.partition = partition_patterns(table, p.cfg.invariance.l,
                                    p.cfg.invariance.aggregation);
  tq.grid = grid;
  tq.embeddings = ge;
}

// ---------------------------------------------------------------------------
// ingest
// ---------------------------------------------------------------------------

struct IngestArgs {
  std::string input;
  std::string out;
  std::size_t window = 64;
  std::size_t stride = 32;
  std::string label = "base";
};

void run_ingest(const IngestArgs& args) {
  if (args.window == 0) throw InvalidWindow("window must be positive");
  if (args.stride == 0) throw InvalidWindow("stride must be positive");
  Corpus corpus = ingest_jsonl(args.input, args.window, args.stride);
  corpus.label = args.label;
  save_corpus(corpus, args.out);
  std::cout << "wrote " << corpus.size() << " chunks to " << args.out << "\n";
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string out_dir;
  std::string resume_state;
  unsigned jobs = 0;
};

// On resume the existing rows up to the resume step are kept verbatim, so a
// resumed CSV is byte-identical to the straight run's.
std::vector<std::string> retained_csv_rows(const std::string& csv_path,
                                           int resume_step) {
  std::vector<std::string> rows;
  std::ifstream in(csv_path, std::ios::binary);
  if (!in) {
    throw IoError("resume needs the existing loss CSV at " + csv_path);
  }
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    std::size_t comma = line.find(',');
    int step = std::stoi(line.substr(0, comma));
    if (step <= resume_step) rows.push_back(line);
  }
  return rows;
}

void run_train(const TrainArgs& args) {
  Pipeline p = load_pipeline(args.config, args.jobs);
  const TrainConfig& tc = p.cfg.train;
  validate_train_config(tc);

  AdapterParams init = init_adapter(
      p.cfg.dim, static_cast<std::size_t>(tc.rank), tc.alpha, tc.dropout_p,
      tc.seed, tc.side);

  TrainSetup setup;
  setup.coarse = p.coarse;
  setup.llm = p.llm;
  setup.invariance = p.cfg.invariance;
  setup.jobs = p.cfg.jobs;
  setup.queries.resize(p.gold.size());
  for (std::size_t i = 0; i < p.gold.size(); ++i) {
    setup.queries[i].query_id = p.gold[i].query_id;
    setup.queries[i].text = p.gold[i].query;
    setup.queries[i].vq = p.query_vecs[i];
  }
  if (tc.lambda > 0.0) {
    ResizedArtifacts rs = build_resized(p);
    for (std::size_t i = 0; i < p.gold.size(); ++i) {
      attach_invariance(p, rs, p.gold[i], p.query_vecs[i], init,
                        setup.queries[i]);
    }
  }

  std::error_code ec;
  fs::create_directories(args.out_dir, ec);
  if (ec) {
    throw IoError("cannot create " + args.out_dir + ": " + ec.message());
  }

  TrainState state;
  std::vector<std::string> retained;
  if (!args.resume_state.empty()) {
    state = resume(args.resume_state, tc);
    retained = retained_csv_rows(args.out_dir + "/loss.csv", state.step);
  } else {
    state.params = init;
    state.lr = lr_at(tc, 0);
  }

  std::string csv_path = args.out_dir + "/loss.csv";
  std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
  if (!csv) throw IoError("cannot open " + csv_path);
  csv << "step,rl,invar,total,lr\n";
  for (const std::string& row : retained) csv << row << "\n";
  csv.flush();

  TrainState final_state = train(
      tc, setup, std::move(state), args.out_dir, [&](const StepRecord& rec) {
        csv << rec.step << ',' << fmt17(rec.rl) << ',' << fmt17(rec.invar)
            << ',' << fmt17(rec.total) << ',' << fmt17(rec.lr) << "\n";
        csv.flush();
      });
  if (!csv) throw IoError("write failed: " + csv_path);

  const LossRow& last = final_state.loss_history.back();
  nlohmann::json report{{"schema", 1},
                        {"config_hash", config_hash(p.cfg)},
                        {"train_config_hash", train_config_hash(tc)},
                        {"steps", final_state.step},
                        {"initial_total", final_state.initial_total},
                        {"final_rl", last.rl},
                        {"final_invar", last.invar},
                        {"final_total", last.total}};
  std::ofstream rep(args.out_dir + "/train_report.json",
                    std::ios::binary | std::ios::trunc);
  if (!rep) throw IoError("cannot open train_report.json");
  rep << report.dump(2) << '\n';
  std::cout << "trained " << final_state.step << " steps; total "
            << fmt17(last.total) << " (from "
            << fmt17(final_state.initial_total) << ")\n";
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string config;
  std::string checkpoint;
  std::string queries_file;
  std::string gold_file;
  std::string ks_csv;
  std::string out;
  bool generation = false;
  unsigned jobs = 0;
};

std::vector<int> parse_ks(const std::string& csv) {
  std::vector<int> ks;
  std::stringstream stream(csv);
  std::string part;
  while (std::getline(stream, part, ',')) {
    if (part.empty()) continue;
    int k = std::stoi(part);
    if (k < 1) throw Error("k values must be positive");
    ks.push_back(k);
  }
  if (ks.empty()) throw Error("no k values given");
  return ks;
}

void run_eval(const EvalArgs& args) {
  if (!args.queries_file.empty() && !args.gold_file.empty() &&
      args.queries_file != args.gold_file) {
    throw Error("--queries and --gold disagree; labels live in one file");
  }
  std::string gold_override =
      !args.gold_file.empty() ? args.gold_file : args.queries_file;
  Pipeline p = load_pipeline(args.config, args.jobs, gold_override);

  AdapterParams params;
  if (args.checkpoint.empty()) {
    // Fresh adapter: B = 0, so scoring reduces to the raw dot product.
    params = init_adapter(p.cfg.dim,
                          static_cast<std::size_t>(p.cfg.train.rank),
                          p.cfg.train.alpha, p.cfg.train.dropout_p,
                          p.cfg.train.seed, p.cfg.train.side);
  } else {
    params = load_adapter(args.checkpoint);
  }
  if (params.dim != p.cfg.dim) {
    throw ConfigMismatch("checkpoint dim " + std::to_string(params.dim) +
                         " vs config dim " + std::to_string(p.cfg.dim));
  }

  std::vector<int> ks =
      args.ks_csv.empty() ? p.cfg.eval_ks : parse_ks(args.ks_csv);

  std::vector<std::string> answer_pool;
  std::shared_ptr<const ChunkTextMap> texts;
  if (args.generation) {
    std::set<std::string> pool(p.cfg.distractors.begin(),
                               p.cfg.distractors.end());
    for (const GoldLabel& label : p.gold) {
      pool.insert(label.gold_answers.begin(), label.gold_answers.end());
    }
    answer_pool.assign(pool.begin(), pool.end());
    texts = std::make_shared<const ChunkTextMap>(chunk_texts(*p.corpus));
  }

  std::vector<QueryEval> rows(p.gold.size());
  parallel_for(p.gold.size(), p.cfg.jobs, [&](std::size_t i) {
    const GoldLabel& label = p.gold[i];
    std::vector<std::pair<ChunkId, double>> ranked =
        adapted_ranking(p.query_vecs[i], *p.coarse, params);
    QueryEval& row = rows[i];
    row.query_id = label.query_id;
    if (label.gold_chunk_ids.empty()) throw MissingGold(label.query_id);
    std::set<ChunkId> gold_set(label.gold_chunk_ids.begin(),
                               label.gold_chunk_ids.end());
    for (int k : ks) {
      bool hit = false;
      std::size_t depth =
          std::min<std::size_t>(static_cast<std::size_t>(k), ranked.size());
      for (std::size_t r = 0; r < depth && !hit; ++r) {
        hit = gold_set.contains(ranked[r].first);
      }
      row.hit_at[k] = hit;
    }
    if (args.generation) {
      RelevanceDistribution rel = renormalize_topk(ranked, p.cfg.k_bar);
      std::string pred = predict_answer(label.query, answer_pool, rel,
                                        *texts, *p.oracle);
      row.em = exact_match(pred, label.gold_answers);
    }
  });

  EvalReport report = make_report(std::move(rows), ks, args.generation,
                                  config_hash(p.cfg));
  emit_report(report, args.out);
  for (int k : report.ks) {
    std::cout << "acc@" << k << " = " << report.acc_at.at(k) << "\n";
  }
  if (report.em_evaluated) {
    std::cout << "exact_match = " << report.exact_match << "\n";
  }
}

// ---------------------------------------------------------------------------
// variance-report
// ---------------------------------------------------------------------------

struct VarianceArgs {
  std::string config;
  std::string checkpoint;
  std::string query_id;
  std::string out;
  unsigned jobs = 0;
};

void run_variance_report(const VarianceArgs& args) {
  Pipeline p = load_pipeline(args.config, args.jobs);
  const GoldLabel* label = nullptr;
  std::size_t index = 0;
  for (std::size_t i = 0; i < p.gold.size(); ++i) {
    if (p.gold[i].query_id == args.query_id) {
      label = &p.gold[i];
      index = i;
      break;
    }
  }
  if (label == nullptr) throw UnknownQueryId(args.query_id);

  AdapterParams params;
  if (args.checkpoint.empty()) {
    params = init_adapter(p.cfg.dim,
                          static_cast<std::size_t>(p.cfg.train.rank),
                          p.cfg.train.alpha, p.cfg.train.dropout_p,
                          p.cfg.train.seed, p.cfg.train.side);
  } else {
    params = load_adapter(args.checkpoint);
  }

  ResizedArtifacts rs = build_resized(p);
  InterventionGrid grid =
      build_grid(label->query, *p.rewriter, p.corpus, rs.corpus,
                 rs.provenance, p.cfg.invariance.resize_factor);
  GridEmbeddings ge;
  ge.vq_base = p.query_vecs[index];
  ge.vq_rewritten = p.coarse_provider->embed(grid.rewritten_query);
  ge.coarse_base = p.coarse;
  ge.llm_base = p.llm;
  ge.coarse_resized = rs.coarse;
  ge.llm_resized = rs.llm;
  ge.texts_base = rs.texts_base;
  ge.texts_resized = rs.texts_resized;

  LSRTable table =
      score_grid(grid, answer_for(*label), *p.oracle, ge, params,
                 p.cfg.invariance.k, p.cfg.invariance.tau,
                 p.cfg.invariance.pooling);
  nlohmann::json doc = variance_report(grid, table);
  doc["config_hash"] = config_hash(p.cfg);
  std::ofstream out(args.out, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + args.out);
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + args.out);
  for (const nlohmann::json& cell : doc["cells"]) {
    std::cout << cell["query_variant"].get<std::string>() << "/"
              << cell["corpus_variant"].get<std::string>() << " churn "
              << cell["churn"].get<std::size_t>() << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Retrieval alignment engine"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  IngestArgs ingest_args;
  CLI::App* ingest = app.add_subcommand(
      "ingest", "Chunk a JSONL document file into a corpus artifact");
  ingest->add_option("--input", ingest_args.input, "Documents JSONL")
      ->required();
  ingest->add_option("--window", ingest_args.window, "Tokens per chunk");
  ingest->add_option("--stride", ingest_args.stride, "Token stride");
  ingest->add_option("--out", ingest_args.out, "Corpus output path")
      ->required();
  ingest->add_option("--label", ingest_args.label, "Corpus label");

  TrainArgs train_args;
  CLI::App* train_cmd =
      app.add_subcommand("train", "Train the adapter per a config file");
  train_cmd->add_option("--config", train_args.config, "Run config file")
      ->required();
  train_cmd->add_option("--out-dir", train_args.out_dir, "Output directory")
      ->required();
  train_cmd->add_option("--resume", train_args.resume_state,
                        "state_<step>.json to continue from");
  train_cmd->add_option("--jobs", train_args.jobs, "Worker cap (0 = cores)");

  EvalArgs eval_args;
  CLI::App* eval_cmd = app.add_subcommand(
      "eval", "Score retrieval (and optionally answers) on labeled queries");
  eval_cmd->add_option("--config", eval_args.config, "Run config file")
      ->required();
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint,
                       "Adapter checkpoint (omit for the fresh adapter)");
  eval_cmd->add_option("--queries", eval_args.queries_file,
                       "Labeled query JSONL (defaults to config gold_file)");
  eval_cmd->add_option("--gold", eval_args.gold_file,
                       "Alias of --queries; labels live in one file");
  eval_cmd->add_option("--ks", eval_args.ks_csv,
                       "Comma-separated k values (default from config)");
  eval_cmd->add_flag("--generation", eval_args.generation,
                     "Also score exact match via answer prediction");
  eval_cmd->add_option("--out", eval_args.out, "Report JSON path")
      ->required();
  eval_cmd->add_option("--jobs", eval_args.jobs, "Worker cap (0 = cores)");

  VarianceArgs var_args;
  CLI::App* var_cmd = app.add_subcommand(
      "variance-report", "Emit the 4-cell intervention report for one query");
  var_cmd->add_option("--config", var_args.config, "Run config file")
      ->required();
  var_cmd->add_option("--checkpoint", var_args.checkpoint,
                      "Adapter checkpoint (omit for the fresh adapter)");
  var_cmd->add_option("--query-id", var_args.query_id, "Query to report on")
      ->required();
  var_cmd->add_option("--out", var_args.out, "Report JSON path")->required();
  var_cmd->add_option("--jobs", var_args.jobs, "Worker cap (0 = cores)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (*ingest) return guarded([&] { run_ingest(ingest_args); });
  if (*train_cmd) return guarded([&] { run_train(train_args); });
  if (*eval_cmd) return guarded([&] { run_eval(eval_args); });
  if (*var_cmd) return guarded([&] { run_variance_report(var_args); });
  return 2;
}
