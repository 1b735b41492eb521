#include "invar/config.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace invar {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) {
    s.remove_prefix(1);
  }
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' ||
                        s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct KeyContext {
  const std::string& origin;
  std::size_t line_no;
  std::string section;
  std::string key;

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError(origin + ":" + std::to_string(line_no) + ": [" +
                      section + "] " + key + ": " + what);
  }
};

double parse_double(const KeyContext& ctx, std::string_view value) {
  try {
    std::size_t used = 0;
    double out = std::stod(std::string(value), &used);
    if (used != value.size()) ctx.fail("trailing characters in number");
    return out;
  } catch (const std::exception&) {
    ctx.fail("expected a number, got '" + std::string(value) + "'");
  }
}

long long parse_int(const KeyContext& ctx, std::string_view value) {
  long long out = 0;
  auto [ptr, ec] =
      std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc{} || ptr != value.data() + value.size()) {
    ctx.fail("expected an integer, got '" + std::string(value) + "'");
  }
  return out;
}

std::uint64_t parse_u64(const KeyContext& ctx, std::string_view value) {
  std::uint64_t out = 0;
  auto [ptr, ec] =
      std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc{} || ptr != value.data() + value.size()) {
    ctx.fail("expected an unsigned integer, got '" + std::string(value) +
             "'");
  }
  return out;
}

bool parse_bool(const KeyContext& ctx, std::string_view value) {
  if (value == "true") return true;
  if (value == "false") return false;
  ctx.fail("expected true or false, got '" + std::string(value) + "'");
}

ProviderKind parse_provider_kind(const KeyContext& ctx,
                                 std::string_view value) {
  if (value == "synthetic") return ProviderKind::Synthetic;
  if (value == "planted") return ProviderKind::Planted;
  if (value == "remote") return ProviderKind::Remote;
  ctx.fail("expected synthetic, planted, or remote");
}

std::vector<std::string> split_list(std::string_view value, char sep) {
  std::vector<std::string> out;
  while (!value.empty()) {
    std::size_t pos = value.find(sep);
    std::string_view item = trim(value.substr(0, pos));
    if (!item.empty()) out.emplace_back(item);
    if (pos == std::string_view::npos) break;
    value.remove_prefix(pos + 1);
  }
  return out;
}

const char* provider_name(ProviderKind kind) {
  switch (kind) {
    case ProviderKind::Synthetic: return "synthetic";
    case ProviderKind::Planted: return "planted";
    case ProviderKind::Remote: return "remote";
  }
  return "synthetic";
}

void apply_key(RunConfig& cfg, const KeyContext& ctx, std::string_view value) {
  const std::string& section = ctx.section;
  const std::string& key = ctx.key;
  if (section == "run") {
    if (key == "seed") {
      cfg.seed = parse_u64(ctx, value);
    } else if (key == "jobs") {
      cfg.jobs = static_cast<unsigned>(parse_u64(ctx, value));
    } else {
      ctx.fail("unknown key");
    }
  } else if (section == "corpus") {
    if (key == "corpus_file") {
      cfg.corpus_file = value;
    } else if (key == "gold_file") {
      cfg.gold_file = value;
    } else if (key == "window") {
      long long v = parse_int(ctx, value);
      if (v < 1) ctx.fail("window must be positive");
      cfg.window = static_cast<std::size_t>(v);
    } else if (key == "stride") {
      long long v = parse_int(ctx, value);
      if (v < 1) ctx.fail("stride must be positive");
      cfg.stride = static_cast<std::size_t>(v);
    } else {
      ctx.fail("unknown key");
    }
  } else if (section == "embedding") {
    if (key == "dim") {
      long long v = parse_int(ctx, value);
      if (v < 1) ctx.fail("dim must be positive");
      cfg.dim = static_cast<std::size_t>(v);
    } else if (key == "coarse_provider") {
      cfg.coarse.kind = parse_provider_kind(ctx, value);
    } else if (key == "coarse_seed") {
      cfg.coarse.seed = parse_u64(ctx, value);
    } else if (key == "coarse_noise") {
      cfg.coarse.noise = parse_double(ctx, value);
    } else if (key == "coarse_endpoint") {
      cfg.coarse.endpoint = value;
    } else if (key == "llm_provider") {
      cfg.llm.kind = parse_provider_kind(ctx, value);
    } else if (key == "llm_seed") {
      cfg.llm.seed = parse_u64(ctx, value);
    } else if (key == "llm_noise") {
      cfg.llm.noise = parse_double(ctx, value);
    } else if (key == "llm_endpoint") {
      cfg.llm.endpoint = value;
    } else {
      ctx.fail("unknown key");
    }
  } else if (section == "oracle") {
    if (key == "kind") {
      if (value == "synthetic") {
        cfg.oracle.kind = OracleKind::Synthetic;
      } else if (value == "remote") {
        cfg.oracle.kind = OracleKind::Remote;
      } else {
        ctx.fail("expected synthetic or remote");
      }
    } else if (key == "beta") {
      cfg.oracle.beta = parse_double(ctx, value);
    } else if (key == "gamma") {
      cfg.oracle.gamma = parse_double(ctx, value);
    } else if (key == "endpoint") {
      cfg.oracle.endpoint = value;
    } else {
      ctx.fail("unknown key");
    }
  } else if (section == "rewriter") {
    if (key == "kind") {
      if (value == "builtin") {
        cfg.rewriter.kind = RewriterKind::Builtin;
      } else if (value == "identity") {
        cfg.rewriter.kind = RewriterKind::Identity;
      } else if (value == "remote") {
        cfg.rewriter.kind = RewriterKind::Remote;
      } else {
        ctx.fail("expected builtin, identity, or remote");
      }
    } else if (key == "endpoint") {
      cfg.rewriter.endpoint = value;
    } else {
      ctx.fail("unknown key");
    }
  } else if (section == "train") {
    if (key == "lr0") {
      cfg.train.lr0 = parse_double(ctx, value);
    } else if (key == "steps") {
      cfg.train.steps = static_cast<int>(parse_int(ctx, value));
    } else if (key == "batch_size") {
      cfg.train.batch_size = static_cast<int>(parse_int(ctx, value));
    } else if (key == "schedule") {
      if (value == "cosine") {
        cfg.train.schedule = LrSchedule::Cosine;
      } else if (value == "constant") {
        cfg.train.schedule = LrSchedule::Constant;
      } else {
        ctx.fail("expected cosine or constant");
      }
    } else if (key == "k") {
      cfg.train.k = static_cast<int>(parse_int(ctx, value));
    } else if (key == "l") {
      cfg.train.l = static_cast<int>(parse_int(ctx, value));
    } else if (key == "lambda") {
      cfg.train.lambda = parse_double(ctx, value);
    } else if (key == "tau") {
      cfg.train.tau = parse_double(ctx, value);
    } else if (key == "eval_every") {
      cfg.train.eval_every = static_cast<int>(parse_int(ctx, value));
    } else if (key == "rank") {
      cfg.train.rank = static_cast<int>(parse_int(ctx, value));
    } else if (key == "alpha") {
      cfg.train.alpha = parse_double(ctx, value);
    } else if (key == "dropout_p") {
      cfg.train.dropout_p = parse_double(ctx, value);
    } else if (key == "momentum") {
      cfg.train.momentum = parse_double(ctx, value);
    } else if (key == "side") {
      if (value == "document") {
        cfg.train.side = AdapterSide::Document;
      } else if (value == "query") {
        cfg.train.side = AdapterSide::Query;
      } else {
        ctx.fail("expected document or query");
      }
    } else {
      ctx.fail("unknown key");
    }
  } else if (section == "invariance") {
    if (key == "subset_samples") {
      long long v = parse_int(ctx, value);
      if (v < 2) ctx.fail("subset_samples must be at least 2");
      cfg.invariance.subset_samples = static_cast<std::size_t>(v);
    } else if (key == "exhaustive") {
      cfg.invariance.exhaustive = parse_bool(ctx, value);
    } else if (key == "aggregation") {
      if (value == "mean") {
        cfg.invariance.aggregation = Aggregation::Mean;
      } else if (value == "min") {
        cfg.invariance.aggregation = Aggregation::Min;
      } else {
        ctx.fail("expected mean or min");
      }
    } else if (key == "pooling") {
      if (value == "max") {
        cfg.invariance.pooling = Pooling::Max;
      } else if (value == "sum") {
        cfg.invariance.pooling = Pooling::Sum;
      } else {
        ctx.fail("expected max or sum");
      }
    } else if (key == "resize_factor") {
      double v = parse_double(ctx, value);
      if (!(v > 0.0)) ctx.fail("resize_factor must be positive");
      cfg.invariance.resize_factor = v;
    } else {
      ctx.fail("unknown key");
    }
  } else if (section == "eval") {
    if (key == "ks") {
      std::vector<std::string> parts = split_list(value, ',');
      if (parts.empty()) ctx.fail("need at least one k");
      cfg.eval_ks.clear();
      for (const std::string& part : parts) {
        long long v = parse_int(ctx, part);
        if (v < 1) ctx.fail("k values must be positive");
        cfg.eval_ks.push_back(static_cast<int>(v));
      }
    } else if (key == "k_bar") {
      long long v = parse_int(ctx, value);
      if (v < 1) ctx.fail("k_bar must be positive");
      cfg.k_bar = static_cast<std::size_t>(v);
    } else if (key == "distractors") {
      cfg.distractors = split_list(value, '|');
    } else {
      ctx.fail("unknown key");
    }
  } else {
    throw ConfigError(ctx.origin + ":" + std::to_string(ctx.line_no) +
                      ": unknown section [" + section + "]");
  }
}

}  // namespace

RunConfig parse_config(std::string_view text, const std::string& origin) {
  RunConfig cfg;
  std::string section;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  std::istringstream stream{std::string(text)};
  std::string raw;
  while (std::getline(stream, raw)) {
    ++line_no;
    std::string_view line = trim(raw);
    if (line.empty() || line.front() == '#' || line.front() == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) {
        throw ConfigError(origin + ":" + std::to_string(line_no) +
                          ": malformed section header");
      }
      section = std::string(trim(line.substr(1, line.size() - 2)));
      static const std::set<std::string> known{
          "run",     "corpus",     "embedding", "oracle",
          "rewriter", "train",     "invariance", "eval"};
      if (!known.count(section)) {
        throw ConfigError(origin + ":" + std::to_string(line_no) +
                          ": unknown section [" + section + "]");
      }
      continue;
    }
    std::size_t eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(origin + ":" + std::to_string(line_no) +
                        ": expected key = value");
    }
    if (section.empty()) {
      throw ConfigError(origin + ":" + std::to_string(line_no) +
                        ": key before any section header");
    }
    KeyContext ctx{origin, line_no, section,
                   std::string(trim(line.substr(0, eq)))};
    if (ctx.key.empty()) ctx.fail("empty key");
    std::string full = section + "." + ctx.key;
    if (!seen.insert(full).second) ctx.fail("duplicate key");
    apply_key(cfg, ctx, trim(line.substr(eq + 1)));
  }
  // Single-source fields fan out after parsing.
  cfg.coarse.dim = cfg.dim;
  cfg.llm.dim = cfg.dim;
  cfg.train.seed = cfg.seed;
  cfg.invariance.l = static_cast<std::size_t>(cfg.train.l);
  cfg.invariance.k = static_cast<std::size_t>(cfg.train.k);
  cfg.invariance.lambda = cfg.train.lambda;
  cfg.invariance.tau = cfg.train.tau;
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str(), path);
}

std::string render_config(const RunConfig& cfg) {
  std::string out;
  out += "[run]\nseed = " + std::to_string(cfg.seed) + "\n";
  out += "jobs = " + std::to_string(cfg.jobs) + "\n";
  out += "[corpus]\ncorpus_file = " + cfg.corpus_file + "\n";
  out += "gold_file = " + cfg.gold_file + "\n";
  out += "window = " + std::to_string(cfg.window) + "\n";
  out += "stride = " + std::to_string(cfg.stride) + "\n";
  out += "[embedding]\ndim = " + std::to_string(cfg.dim) + "\n";
  for (const auto& [prefix, spec] :
       {std::pair<const char*, const ProviderSpec&>{"coarse", cfg.coarse},
        {"llm", cfg.llm}}) {
    std::string p = prefix;
    out += p + "_provider = " + provider_name(spec.kind) + "\n";
    out += p + "_seed = " + std::to_string(spec.seed) + "\n";
    out += p + "_noise = " + fmt_double(spec.noise) + "\n";
    out += p + "_endpoint = " + spec.endpoint + "\n";
  }
  out += "[oracle]\nkind = ";
  out += cfg.oracle.kind == OracleKind::Synthetic ? "synthetic" : "remote";
  out += "\nbeta = " + fmt_double(cfg.oracle.beta) + "\n";
  out += "gamma = " + fmt_double(cfg.oracle.gamma) + "\n";
  out += "endpoint = " + cfg.oracle.endpoint + "\n";
  out += "[rewriter]\nkind = ";
  switch (cfg.rewriter.kind) {
    case RewriterKind::Builtin: out += "builtin"; break;
    case RewriterKind::Identity: out += "identity"; break;
    case RewriterKind::Remote: out += "remote"; break;
  }
  out += "\nendpoint = " + cfg.rewriter.endpoint + "\n";
  out += "[train]\nlr0 = " + fmt_double(cfg.train.lr0) + "\n";
  out += "steps = " + std::to_string(cfg.train.steps) + "\n";
  out += "batch_size = " + std::to_string(cfg.train.batch_size) + "\n";
  out += "schedule = ";
  out += cfg.train.schedule == LrSchedule::Cosine ? "cosine" : "constant";
  out += "\nk = " + std::to_string(cfg.train.k) + "\n";
  out += "l = " + std::to_string(cfg.train.l) + "\n";
  out += "lambda = " + fmt_double(cfg.train.lambda) + "\n";
  out += "tau = " + fmt_double(cfg.train.tau) + "\n";
  out += "eval_every = " + std::to_string(cfg.train.eval_every) + "\n";
  out += "rank = " + std::to_string(cfg.train.rank) + "\n";
  out += "alpha = " + fmt_double(cfg.train.alpha) + "\n";
  out += "dropout_p = " + fmt_double(cfg.train.dropout_p) + "\n";
  out += "momentum = " + fmt_double(cfg.train.momentum) + "\n";
  out += "side = ";
  out += cfg.train.side == AdapterSide::Document ? "document" : "query";
  out += "\n[invariance]\nsubset_samples = " +
         std::to_string(cfg.invariance.subset_samples) + "\n";
  out += "exhaustive = ";
  out += cfg.invariance.exhaustive ? "true" : "false";
  out += "\naggregation = ";
  out += cfg.invariance.aggregation == Aggregation::Mean ? "mean" : "min";
  out += "\npooling = ";
  out += cfg.invariance.pooling == Pooling::Max ? "max" : "sum";
  out += "\nresize_factor = " + fmt_double(cfg.invariance.resize_factor) +
         "\n";
  out += "[eval]\nks = ";
  for (std::size_t i = 0; i < cfg.eval_ks.size(); ++i) {
    if (i > 0) out += ",";
    out += std::to_string(cfg.eval_ks[i]);
  }
  out += "\nk_bar = " + std::to_string(cfg.k_bar) + "\n";
  out += "distractors = ";
  for (std::size_t i = 0; i < cfg.distractors.size(); ++i) {
    if (i > 0) out += "|";
    out += cfg.distractors[i];
  }
  out += "\n";
  return out;
}

std::string config_hash(const RunConfig& cfg) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(render_config(cfg))));
  return buf;
}

void apply_env_overrides(RunConfig& cfg) {
  if (const char* v = std::getenv("INVAR_EMBED_ENDPOINT")) {
    cfg.coarse.endpoint = v;
    cfg.llm.endpoint = v;
  }
  if (const char* v = std::getenv("INVAR_ORACLE_ENDPOINT")) {
    cfg.oracle.endpoint = v;
  }
  if (const char* v = std::getenv("INVAR_REWRITER_ENDPOINT")) {
    cfg.rewriter.endpoint = v;
  }
}

std::unique_ptr<QueryRewriter> make_rewriter(const RewriterSpec& spec) {
  switch (spec.kind) {
    case RewriterKind::Builtin:
      return std::make_unique<BuiltinRewriter>();
    case RewriterKind::Identity:
      return std::make_unique<IdentityRewriter>();
    case RewriterKind::Remote:
      return std::make_unique<RemoteRewriter>(spec.endpoint);
  }
  throw Error("unreachable rewriter kind");
}

}  // namespace invar
