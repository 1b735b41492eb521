#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "invar/metrics.hpp"

using namespace invar;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("acc_at_k counts top-k gold intersections") {
  RankedRetrievals retrievals{
      {"q0", {0, 1, 2}},   // gold 0 at rank 1
      {"q1", {5, 6, 7}},   // gold 7 at rank 3
      {"q2", {8, 9, 10}},  // gold 99 never retrieved
      {"q3", {3, 4}},      // gold 4 at rank 2
  };
  GoldMap gold{{"q0", {0}}, {"q1", {7}}, {"q2", {99}}, {"q3", {4}}};

  CHECK(acc_at_k(retrievals, gold, 1) == doctest::Approx(0.25));
  CHECK(acc_at_k(retrievals, gold, 2) == doctest::Approx(0.5));
  // Boundary inclusive: gold exactly at rank 3 counts at k=3.
  CHECK(acc_at_k(retrievals, gold, 3) == doctest::Approx(0.75));
  // k beyond the list length evaluates available ranks only.
  CHECK(acc_at_k(retrievals, gold, 50) == doctest::Approx(0.75));
}

TEST_CASE("acc_at_k is monotone in k") {
  RankedRetrievals retrievals{
      {"a", {3, 1, 4, 5, 9}}, {"b", {2, 7, 1, 8, 6}}, {"c", {0, 1, 2, 3, 4}}};
  GoldMap gold{{"a", {9}}, {"b", {1}}, {"c", {7}}};
  double prev = 0.0;
  for (std::size_t k = 1; k <= 6; ++k) {
    double acc = acc_at_k(retrievals, gold, k);
    CHECK(acc >= prev);
    prev = acc;
  }
}

TEST_CASE("acc_at_k input contracts") {
  RankedRetrievals retrievals{{"q0", {0}}};
  GoldMap gold{{"q0", {0}}};
  CHECK_THROWS_AS(acc_at_k(retrievals, gold, 0), Error);
  CHECK_THROWS_AS(acc_at_k(RankedRetrievals{}, gold, 1), EmptyQuerySet);

  GoldMap missing;
  try {
    acc_at_k(retrievals, missing, 1);
    CHECK(false);
  } catch (const MissingGold& e) {
    CHECK(e.query_id == "q0");
  }
  GoldMap empty_entry{{"q0", {}}};
  CHECK_THROWS_AS(acc_at_k(retrievals, empty_entry, 1), MissingGold);
}

TEST_CASE("normalize_answer folds case, punctuation, and articles") {
  CHECK(normalize_answer("Ross Bagdasarian, Sr.") == "ross bagdasarian sr");
  CHECK(normalize_answer("The Answer") == "answer");
  CHECK(normalize_answer("a  an the") == "");
  CHECK(normalize_answer("  spaced   out  ") == "spaced out");
  CHECK(normalize_answer("Keep-hyphen? No.") == "keephyphen no");
}

TEST_CASE("exact_match is normalized containment") {
  std::vector<std::string> gold{"ross bagdasarian"};
  CHECK(exact_match("Ross Bagdasarian, Sr.", gold));
  CHECK_FALSE(exact_match("The answer is unknown",
                          std::vector<std::string>{"Paris"}));
  CHECK(exact_match("paris", std::vector<std::string>{"paris"}));
  CHECK(exact_match("the capital is Paris, obviously",
                    std::vector<std::string>{"paris"}));
  // Any gold alternative suffices.
  CHECK(exact_match("it was Bob", std::vector<std::string>{"alice", "bob"}));
  CHECK_THROWS_AS(exact_match("x", std::vector<std::string>{}), EmptyGold);
}

TEST_CASE("make_report recomputes aggregates from per-query rows") {
  std::vector<QueryEval> rows(4);
  rows[0] = {"q2", {{5, true}, {20, true}}, true};
  rows[1] = {"q0", {{5, false}, {20, true}}, false};
  rows[2] = {"q3", {{5, true}, {20, true}}, true};
  rows[3] = {"q1", {{5, false}, {20, false}}, false};

  std::vector<int> ks{20, 5, 20};
  EvalReport report = make_report(rows, ks, true, "cafebabe");
  CHECK(report.ks == std::vector<int>{5, 20});  // sorted, deduped
  CHECK(report.acc_at.at(5) == doctest::Approx(0.5));
  CHECK(report.acc_at.at(20) == doctest::Approx(0.75));
  CHECK(report.exact_match == doctest::Approx(0.5));
  CHECK(report.em_evaluated);
  CHECK(report.config_hash == "cafebabe");
  // Rows come back sorted by query id.
  CHECK(report.per_query[0].query_id == "q0");
  CHECK(report.per_query[3].query_id == "q3");

  // A row missing one of the requested ks is rejected.
  rows[1].hit_at.erase(5);
  CHECK_THROWS_AS(make_report(rows, ks, true, "x"), Error);
}

TEST_CASE("emit_report writes byte-stable JSON plus a text table") {
  fs::path dir = fs::temp_directory_path() / "invar_metrics_test";
  fs::create_directories(dir);
  fs::path p1 = dir / "r1.json";
  fs::path p2 = dir / "r2.json";

  std::vector<QueryEval> rows(2);
  rows[0] = {"qa", {{5, true}, {20, true}}, true};
  rows[1] = {"qb", {{5, false}, {20, true}}, false};
  std::vector<int> ks{5, 20};
  EvalReport report = make_report(rows, ks, true, "deadbeef");

  emit_report(report, p1.string());
  emit_report(report, p2.string());
  CHECK(read_file(p1) == read_file(p2));
  CHECK(read_file(p1.string() + ".txt") == read_file(p2.string() + ".txt"));

  std::string table = read_file(p1.string() + ".txt");
  CHECK(table.find("acc@5") != std::string::npos);
  CHECK(table.find("acc@20") != std::string::npos);
  CHECK(table.find("exact_match") != std::string::npos);

  EvalReport loaded = load_report(p1.string());
  CHECK(loaded.ks == report.ks);
  CHECK(loaded.acc_at == report.acc_at);
  CHECK(loaded.exact_match == report.exact_match);
  CHECK(loaded.em_evaluated == report.em_evaluated);
  CHECK(loaded.config_hash == report.config_hash);
  REQUIRE(loaded.per_query.size() == 2);
  CHECK(loaded.per_query[0].query_id == "qa");
  CHECK(loaded.per_query[0].hit_at == report.per_query[0].hit_at);
  CHECK(loaded.per_query[1].em == false);

  // Emitting the loaded report reproduces the original bytes.
  fs::path p3 = dir / "r3.json";
  emit_report(loaded, p3.string());
  CHECK(read_file(p3) == read_file(p1));

  CHECK_THROWS_AS(load_report((dir / "missing.json").string()), IoError);
  fs::path bad = dir / "bad.json";
  {
    std::ofstream out(bad);
    out << "{\"schema\": 2}";
  }
  CHECK_THROWS_WITH_AS(load_report(bad.string()), "unsupported report schema",
                       Error);
}

TEST_CASE("report without EM omits it from the table") {
  fs::path dir = fs::temp_directory_path() / "invar_metrics_test";
  fs::create_directories(dir);
  fs::path p = dir / "noem.json";
  std::vector<QueryEval> rows(1);
  rows[0] = {"q", {{5, true}}, false};
  std::vector<int> ks{5};
  EvalReport report = make_report(rows, ks, false, "00");
  emit_report(report, p.string());
  std::string table = read_file(p.string() + ".txt");
  CHECK(table.find("acc@5") != std::string::npos);
  CHECK(table.find("exact_match") == std::string::npos);
  EvalReport loaded = load_report(p.string());
  CHECK_FALSE(loaded.em_evaluated);
}
