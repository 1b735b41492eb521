// Config parsing, canonical rendering, hashing, env overrides, fan-out.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "invar/config.hpp"

using namespace invar;
namespace fs = std::filesystem;

namespace {

const char* kFullConfig = R"(# full example, one of every section
[run]
seed = 42
jobs = 2

[corpus]
corpus_file = docs.jsonl
gold_file = gold.jsonl
window = 48
stride = 24

[embedding]
dim = 32
coarse_provider = planted
coarse_seed = 7
coarse_noise = 1.5
llm_provider = synthetic
llm_seed = 9

[oracle]
kind = synthetic
beta = 6
gamma = 4

[rewriter]
kind = identity

[train]
lr0 = 0.25
steps = 120
batch_size = 8
schedule = constant
k = 12
l = 3
lambda = 0.5
tau = 2
eval_every = 40
rank = 4
alpha = 16
dropout_p = 0.1
momentum = 0.9
side = query

[invariance]
subset_samples = 64
exhaustive = false
aggregation = min
pooling = sum
resize_factor = 0.25

[eval]
ks = 1, 5, 20
k_bar = 3
distractors = red herring | decoy
)";

}  // namespace

TEST_CASE("defaults cover a runnable configuration") {
  RunConfig cfg = parse_config("[run]\nseed = 1\n", "inline");
  CHECK(cfg.seed == 1);
  CHECK(cfg.jobs == 0);
  CHECK(cfg.window == 64);
  CHECK(cfg.stride == 32);
  CHECK(cfg.dim == 64);
  CHECK(cfg.coarse.kind == ProviderKind::Synthetic);
  CHECK(cfg.llm.kind == ProviderKind::Synthetic);
  CHECK(cfg.oracle.kind == OracleKind::Synthetic);
  CHECK(cfg.oracle.beta == doctest::Approx(5.0));
  CHECK(cfg.oracle.gamma == doctest::Approx(5.0));
  CHECK(cfg.rewriter.kind == RewriterKind::Builtin);
  CHECK(cfg.train.lr0 == doctest::Approx(1e-2));
  CHECK(cfg.train.batch_size == 64);
  CHECK(cfg.train.schedule == LrSchedule::Cosine);
  CHECK(cfg.train.k == 16);
  CHECK(cfg.train.l == 4);
  CHECK(cfg.train.rank == 16);
  CHECK(cfg.train.alpha == doctest::Approx(32.0));
  CHECK(cfg.train.dropout_p == doctest::Approx(0.05));
  CHECK(cfg.eval_ks == std::vector<int>{5, 20});
  CHECK(cfg.k_bar == 5);
  CHECK(cfg.distractors.empty());
}

TEST_CASE("every recognized key lands in its field") {
  RunConfig cfg = parse_config(kFullConfig, "full");
  CHECK(cfg.seed == 42);
  CHECK(cfg.jobs == 2);
  CHECK(cfg.corpus_file == "docs.jsonl");
  CHECK(cfg.gold_file == "gold.jsonl");
  CHECK(cfg.window == 48);
  CHECK(cfg.stride == 24);
  CHECK(cfg.dim == 32);
  CHECK(cfg.coarse.kind == ProviderKind::Planted);
  CHECK(cfg.coarse.seed == 7);
  CHECK(cfg.coarse.noise == doctest::Approx(1.5));
  CHECK(cfg.llm.kind == ProviderKind::Synthetic);
  CHECK(cfg.llm.seed == 9);
  CHECK(cfg.oracle.beta == doctest::Approx(6.0));
  CHECK(cfg.oracle.gamma == doctest::Approx(4.0));
  CHECK(cfg.rewriter.kind == RewriterKind::Identity);
  CHECK(cfg.train.lr0 == doctest::Approx(0.25));
  CHECK(cfg.train.steps == 120);
  CHECK(cfg.train.batch_size == 8);
  CHECK(cfg.train.schedule == LrSchedule::Constant);
  CHECK(cfg.train.k == 12);
  CHECK(cfg.train.l == 3);
  CHECK(cfg.train.lambda == doctest::Approx(0.5));
  CHECK(cfg.train.tau == doctest::Approx(2.0));
  CHECK(cfg.train.eval_every == 40);
  CHECK(cfg.train.rank == 4);
  CHECK(cfg.train.alpha == doctest::Approx(16.0));
  CHECK(cfg.train.dropout_p == doctest::Approx(0.1));
  CHECK(cfg.train.momentum == doctest::Approx(0.9));
  CHECK(cfg.train.side == AdapterSide::Query);
  CHECK(cfg.invariance.subset_samples == 64);
  CHECK_FALSE(cfg.invariance.exhaustive);
  CHECK(cfg.invariance.aggregation == Aggregation::Min);
  CHECK(cfg.invariance.pooling == Pooling::Sum);
  CHECK(cfg.invariance.resize_factor == doctest::Approx(0.25));
  CHECK(cfg.eval_ks == std::vector<int>{1, 5, 20});
  CHECK(cfg.k_bar == 3);
  CHECK(cfg.distractors == std::vector<std::string>{"red herring", "decoy"});
}

TEST_CASE("single-source fields fan out") {
  RunConfig cfg = parse_config(kFullConfig, "full");
  CHECK(cfg.coarse.dim == 32);
  CHECK(cfg.llm.dim == 32);
  CHECK(cfg.train.seed == 42);
  CHECK(cfg.invariance.l == 3);
  CHECK(cfg.invariance.k == 12);
  CHECK(cfg.invariance.lambda == doctest::Approx(0.5));
  CHECK(cfg.invariance.tau == doctest::Approx(2.0));
}

TEST_CASE("comments, blank lines, and whitespace are tolerated") {
  RunConfig cfg = parse_config(
      "# leading comment\n"
      "\n"
      "  [run]  \n"
      "; alternative comment style\n"
      "  seed   =   9  \n"
      "\t[corpus]\r\n"
      "window = 10\r\n",
      "inline");
  CHECK(cfg.seed == 9);
  CHECK(cfg.window == 10);
}

TEST_CASE("errors name the origin, line, section, and key") {
  auto message_of = [](const char* text) {
    try {
      parse_config(text, "bad.ini");
      return std::string("no error");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
  };

  SUBCASE("unknown key") {
    std::string msg = message_of("[run]\nseed = 1\nspeed = 2\n");
    CHECK(msg.find("bad.ini:3") != std::string::npos);
    CHECK(msg.find("[run]") != std::string::npos);
    CHECK(msg.find("speed") != std::string::npos);
  }
  SUBCASE("unknown section") {
    std::string msg = message_of("[runn]\nseed = 1\n");
    CHECK(msg.find("bad.ini:1") != std::string::npos);
    CHECK(msg.find("runn") != std::string::npos);
  }
  SUBCASE("duplicate key") {
    std::string msg = message_of("[run]\nseed = 1\nseed = 2\n");
    CHECK(msg.find("bad.ini:3") != std::string::npos);
    CHECK(msg.find("duplicate") != std::string::npos);
  }
  SUBCASE("same key in different sections is not a duplicate") {
    RunConfig cfg = parse_config(
        "[oracle]\nendpoint = http://a\n[rewriter]\nendpoint = http://b\n",
        "inline");
    CHECK(cfg.oracle.endpoint == "http://a");
    CHECK(cfg.rewriter.endpoint == "http://b");
  }
  SUBCASE("key before any section") {
    std::string msg = message_of("seed = 1\n");
    CHECK(msg.find("bad.ini:1") != std::string::npos);
    CHECK(msg.find("section") != std::string::npos);
  }
  SUBCASE("missing equals sign") {
    std::string msg = message_of("[run]\nseed 1\n");
    CHECK(msg.find("bad.ini:2") != std::string::npos);
  }
  SUBCASE("malformed number") {
    std::string msg = message_of("[train]\nlr0 = fast\n");
    CHECK(msg.find("bad.ini:2") != std::string::npos);
    CHECK(msg.find("lr0") != std::string::npos);
  }
  SUBCASE("bad enum value") {
    CHECK_THROWS_AS(parse_config("[train]\nschedule = linear\n", "x"),
                    ConfigError);
    CHECK_THROWS_AS(parse_config("[embedding]\ncoarse_provider = dense\n",
                                 "x"),
                    ConfigError);
    CHECK_THROWS_AS(parse_config("[invariance]\nexhaustive = yes\n", "x"),
                    ConfigError);
  }
  SUBCASE("out-of-range values") {
    CHECK_THROWS_AS(parse_config("[corpus]\nwindow = 0\n", "x"), ConfigError);
    CHECK_THROWS_AS(parse_config("[embedding]\ndim = -3\n", "x"), ConfigError);
    CHECK_THROWS_AS(parse_config("[invariance]\nresize_factor = 0\n", "x"),
                    ConfigError);
    CHECK_THROWS_AS(parse_config("[invariance]\nsubset_samples = 1\n", "x"),
                    ConfigError);
    CHECK_THROWS_AS(parse_config("[eval]\nks = 5,0\n", "x"), ConfigError);
  }
}

TEST_CASE("render_config round-trips through parse_config") {
  RunConfig cfg = parse_config(kFullConfig, "full");
  std::string rendered = render_config(cfg);
  RunConfig reparsed = parse_config(rendered, "rendered");
  CHECK(render_config(reparsed) == rendered);
  CHECK(config_hash(reparsed) == config_hash(cfg));
}

TEST_CASE("config_hash is stable and value-sensitive") {
  RunConfig a = parse_config(kFullConfig, "full");
  RunConfig b = parse_config(kFullConfig, "other-origin");
  CHECK(config_hash(a) == config_hash(b));  // origin is not hashed
  CHECK(config_hash(a).size() == 16);
  for (char c : config_hash(a)) {
    CHECK(((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f')));
  }

  RunConfig changed = a;
  changed.train.lambda = 0.75;
  CHECK(config_hash(changed) != config_hash(a));
  changed = a;
  changed.train.schedule = LrSchedule::Cosine;
  CHECK(config_hash(changed) != config_hash(a));
  changed = a;
  changed.seed = 43;
  CHECK(config_hash(changed) != config_hash(a));
}

TEST_CASE("load_config reads a file and uses its path as origin") {
  fs::path dir = fs::temp_directory_path() / "invar_config_test";
  fs::create_directories(dir);
  fs::path path = dir / "run.ini";
  {
    std::ofstream out(path);
    out << kFullConfig;
  }
  RunConfig cfg = load_config(path.string());
  CHECK(cfg.seed == 42);

  {
    std::ofstream out(path);
    out << "[run]\nbogus = 1\n";
  }
  try {
    load_config(path.string());
    CHECK(false);
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find(path.string() + ":2") !=
          std::string::npos);
  }
  CHECK_THROWS_AS(load_config((dir / "missing.ini").string()), IoError);
}

TEST_CASE("environment overrides replace file endpoints") {
  RunConfig cfg = parse_config(
      "[embedding]\ncoarse_endpoint = http://file-coarse\n"
      "[oracle]\nendpoint = http://file-oracle\n",
      "inline");
  ::setenv("INVAR_EMBED_ENDPOINT", "http://env-embed", 1);
  ::setenv("INVAR_ORACLE_ENDPOINT", "http://env-oracle", 1);
  ::unsetenv("INVAR_REWRITER_ENDPOINT");
  apply_env_overrides(cfg);
  CHECK(cfg.coarse.endpoint == "http://env-embed");
  CHECK(cfg.llm.endpoint == "http://env-embed");
  CHECK(cfg.oracle.endpoint == "http://env-oracle");
  CHECK(cfg.rewriter.endpoint.empty());

  ::setenv("INVAR_REWRITER_ENDPOINT", "http://env-rewrite", 1);
  apply_env_overrides(cfg);
  CHECK(cfg.rewriter.endpoint == "http://env-rewrite");

  ::unsetenv("INVAR_EMBED_ENDPOINT");
  ::unsetenv("INVAR_ORACLE_ENDPOINT");
  ::unsetenv("INVAR_REWRITER_ENDPOINT");
  RunConfig untouched = parse_config(
      "[embedding]\ncoarse_endpoint = http://file-coarse\n", "inline");
  apply_env_overrides(untouched);
  CHECK(untouched.coarse.endpoint == "http://file-coarse");
}

TEST_CASE("make_rewriter dispatches on kind") {
  RewriterSpec builtin;
  CHECK(make_rewriter(builtin)->rewrite("what is the capital of France") ==
        "is capital of france what");
  RewriterSpec identity{RewriterKind::Identity, ""};
  CHECK(make_rewriter(identity)->rewrite("Keep Me As-Is") == "Keep Me As-Is");
}
