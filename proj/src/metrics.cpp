#include "invar/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <set>

#include "json.hpp"

namespace invar {

using nlohmann::json;

double acc_at_k(const RankedRetrievals& retrievals, const GoldMap& gold,
                std::size_t k) {
  if (retrievals.empty()) throw EmptyQuerySet("no retrievals to score");
  if (k == 0) throw Error("k must be at least 1");
  std::size_t hits = 0;
  for (const auto& [query_id, ranked] : retrievals) {
    auto it = gold.find(query_id);
    if (it == gold.end() || it->second.empty()) throw MissingGold(query_id);
    std::set<ChunkId> gold_set(it->second.begin(), it->second.end());
    std::size_t depth = std::min(k, ranked.size());
    for (std::size_t i = 0; i < depth; ++i) {
      if (gold_set.contains(ranked[i])) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(retrievals.size());
}

std::string normalize_answer(std::string_view s) {
  std::string depunct;
  depunct.reserve(s.size());
  for (char c : s) {
    unsigned char uc = static_cast<unsigned char>(c);
    if (std::ispunct(uc)) continue;
    depunct.push_back(static_cast<char>(std::tolower(uc)));
  }
  std::vector<std::string> tokens = tokenize(depunct);
  std::erase_if(tokens, [](const std::string& tok) {
    return tok == "a" || tok == "an" || tok == "the";
  });
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

bool exact_match(const std::string& prediction,
                 std::span<const std::string> gold_answers) {
  if (gold_answers.empty()) throw EmptyGold("no gold answers");
  std::string pred = normalize_answer(prediction);
  for (const std::string& gold : gold_answers) {
    if (pred.find(normalize_answer(gold)) != std::string::npos) return true;
  }
  return false;
}

EvalReport make_report(std::vector<QueryEval> per_query,
                       std::span<const int> ks, bool em_evaluated,
                       std::string config_hash) {
  if (per_query.empty()) throw EmptyQuerySet("no per-query results");
  EvalReport report;
  report.ks.assign(ks.begin(), ks.end());
  std::sort(report.ks.begin(), report.ks.end());
  report.ks.erase(std::unique(report.ks.begin(), report.ks.end()),
                  report.ks.end());
  report.em_evaluated = em_evaluated;
  report.config_hash = std::move(config_hash);
  std::stable_sort(per_query.begin(), per_query.end(),
                   [](const QueryEval& a, const QueryEval& b) {
                     return a.query_id < b.query_id;
                   });
  report.per_query = std::move(per_query);
  double n = static_cast<double>(report.per_query.size());
  for (int k : report.ks) {
    std::size_t hits = 0;
    for (const QueryEval& q : report.per_query) {
      auto it = q.hit_at.find(k);
      if (it == q.hit_at.end()) {
        throw Error("per-query result missing hit@" + std::to_string(k));
      }
      hits += it->second ? 1 : 0;
    }
    report.acc_at[k] = static_cast<double>(hits) / n;
  }
  if (em_evaluated) {
    std::size_t hits = 0;
    for (const QueryEval& q : report.per_query) hits += q.em ? 1 : 0;
    report.exact_match = static_cast<double>(hits) / n;
  }
  return report;
}

void emit_report(const EvalReport& report, const std::string& path) {
  json acc = json::object();
  for (const auto& [k, v] : report.acc_at) acc[std::to_string(k)] = v;
  json rows = json::array();
  for (const QueryEval& q : report.per_query) {
    json hits = json::object();
    for (const auto& [k, hit] : q.hit_at) hits[std::to_string(k)] = hit;
    rows.push_back(
        {{"query_id", q.query_id}, {"hit_at", hits}, {"em", q.em}});
  }
  json doc{{"schema", 1},
           {"config_hash", report.config_hash},
           {"ks", report.ks},
           {"acc_at", acc},
           {"exact_match", report.exact_match},
           {"em_evaluated", report.em_evaluated},
           {"per_query", rows}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path);
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path);

  std::size_t width = std::string("exact_match").size();
  for (int k : report.ks) {
    width = std::max(width, ("acc@" + std::to_string(k)).size());
  }
  auto row = [width](const std::string& name, const std::string& value) {
    std::string line = name;
    line.append(width - name.size(), ' ');
    line += "  " + value + "\n";
    return line;
  };
  auto fixed6 = [](double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6f", x);
    return std::string(buf);
  };
  std::string table = row("metric", "value");
  for (int k : report.ks) {
    table += row("acc@" + std::to_string(k), fixed6(report.acc_at.at(k)));
  }
  if (report.em_evaluated) {
    table += row("exact_match", fixed6(report.exact_match));
  }
  std::ofstream txt(path + ".txt", std::ios::binary | std::ios::trunc);
  if (!txt) throw IoError("cannot open " + path + ".txt");
  txt << table;
  if (!txt) throw IoError("write failed: " + path + ".txt");
}

EvalReport load_report(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) {
    throw IoError("unparseable report: " + path);
  }
  try {
    if (doc.at("schema").get<int>() != 1) {
      throw Error("unsupported report schema");
    }
    EvalReport report;
    report.config_hash = doc.at("config_hash").get<std::string>();
    report.ks = doc.at("ks").get<std::vector<int>>();
    for (const auto& [key, value] : doc.at("acc_at").items()) {
      report.acc_at[std::stoi(key)] = value.get<double>();
    }
    report.exact_match = doc.at("exact_match").get<double>();
    report.em_evaluated = doc.at("em_evaluated").get<bool>();
    for (const json& row : doc.at("per_query")) {
      QueryEval q;
      q.query_id = row.at("query_id").get<std::string>();
      for (const auto& [key, value] : row.at("hit_at").items()) {
        q.hit_at[std::stoi(key)] = value.get<bool>();
      }
      q.em = row.at("em").get<bool>();
      report.per_query.push_back(std::move(q));
    }
    return report;
  } catch (const json::exception& e) {
    throw IoError("report missing fields: " + std::string(e.what()));
  }
}

}  // namespace invar
