#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "invar/corpus.hpp"
#include "invar/embedding.hpp"

using namespace invar;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Corpus tiny_corpus() {
  return build_corpus({{"d0", "alpha beta"}, {"d1", "gamma delta"},
                       {"d2", "alpha beta"}},
                      2, 2);
}

}  // namespace

TEST_CASE("synthetic provider golden vector") {
  SyntheticProvider p(1, 4);
  Embedding v = p.embed("q0");
  REQUIRE(v.dim() == 4);
  // Frozen output of the hash -> splitmix64 -> Box-Muller -> normalize
  // pipeline; any drift in the PRNG stack trips this.
  CHECK(v.values[0] == doctest::Approx(-0.11437007058057523).epsilon(1e-12));
  CHECK(v.values[1] == doctest::Approx(-0.9193808551172865).epsilon(1e-12));
  CHECK(v.values[2] == doctest::Approx(-0.06897356232602693).epsilon(1e-12));
  CHECK(v.values[3] == doctest::Approx(-0.3700013214831254).epsilon(1e-12));

  SyntheticProvider p5(1, 5);
  Embedding w = p5.embed("q0");
  REQUIRE(w.dim() == 5);
  CHECK(w.values[0] == doctest::Approx(-0.11262091201232499).epsilon(1e-12));
  CHECK(w.values[4] == doctest::Approx(-0.17422340777145076).epsilon(1e-12));
}

TEST_CASE("synthetic provider determinism and seed sensitivity") {
  SyntheticProvider a(7, 16), b(7, 16), c(8, 16);
  Embedding va = a.embed("some text");
  CHECK(va.values == b.embed("some text").values);
  CHECK(va.values != c.embed("some text").values);
  CHECK(va.values != a.embed("other text").values);
}

TEST_CASE("provider outputs are unit vectors") {
  SyntheticProvider p(3, 24);
  for (const char* t : {"a", "b", "longer text with tokens", ""}) {
    CHECK(norm(p.embed(t).values) == doctest::Approx(1.0).epsilon(1e-9));
  }
  PlantedProvider planted(3, 24, 0.25);
  planted.plant("doc text", "query text");
  CHECK(norm(planted.embed("doc text").values) ==
        doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("planted provider geometry") {
  PlantedProvider exact(5, 8, 0.0);
  exact.plant("the doc", "the query");
  Embedding vq = exact.embed("the query");
  Embedding vd = exact.embed("the doc");
  CHECK(dot(vq, vd) == doctest::Approx(1.0).epsilon(1e-9));

  PlantedProvider noisy(5, 8, 0.5);
  noisy.plant("the doc", "the query");
  Embedding vn = noisy.embed("the doc");
  CHECK(dot(vq, vn) > 0.5);
  CHECK(dot(vq, vn) < 1.0 - 1e-6);

  // Unregistered texts fall through to the synthetic path.
  SyntheticProvider base(5, 8);
  CHECK(noisy.embed("unrelated").values == base.embed("unrelated").values);
}

TEST_CASE("normalize_in_place rejects near-zero vectors") {
  Embedding v{{1e-15, -1e-15}};
  CHECK_THROWS_AS(normalize_in_place(v), ZeroVector);
  Embedding ok{{3.0, 4.0}};
  normalize_in_place(ok);
  CHECK(ok.values[0] == doctest::Approx(0.6).epsilon(1e-15));
}

TEST_CASE("embed_corpus is worker-count independent with stable rows") {
  Corpus corpus = tiny_corpus();
  SyntheticProvider p(11, 12);
  EmbeddingMatrix m1 = embed_corpus(p, corpus, "coarse", 1);
  EmbeddingMatrix m4 = embed_corpus(p, corpus, "coarse", 4);
  REQUIRE(m1.size() == 3);
  CHECK(m1.provider_tag == "coarse");
  CHECK(m1.corpus_label == "base");
  CHECK(m1.dim == 12);
  for (ChunkId id = 0; id < 3; ++id) {
    CHECK(m1.row(id).values == m4.row(id).values);
  }
  // Chunks 0 and 2 share text, so their rows are identical.
  CHECK(m1.row(0).values == m1.row(2).values);
  CHECK(m1.row(0).values != m1.row(1).values);
  CHECK_THROWS_AS(m1.row(9), Error);
}

TEST_CASE("matrix persistence round-trips bitwise") {
  fs::path dir = fs::temp_directory_path() / "invar_embed_test";
  fs::create_directories(dir);
  fs::path p = dir / "m.ivem";

  EmbeddingMatrix m = embed_corpus(SyntheticProvider(2, 6), tiny_corpus(),
                                   "llm", 1);
  save_matrix(m, p.string());
  EmbeddingMatrix loaded = load_matrix(p.string());
  CHECK(loaded.provider_tag == "llm");
  CHECK(loaded.corpus_label == "base");
  CHECK(loaded.dim == 6);
  REQUIRE(loaded.size() == m.size());
  for (ChunkId id = 0; id < m.size(); ++id) {
    CHECK(loaded.row(id).values == m.row(id).values);
  }

  // Truncated payload is rejected.
  std::string bytes;
  {
    std::ifstream in(p, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(load_matrix(p.string()), CorruptCheckpoint);
  CHECK_THROWS_AS(load_matrix((dir / "missing.ivem").string()), IoError);
}

TEST_CASE("top_k ordering, ties, and clamping") {
  EmbeddingMatrix m;
  m.dim = 2;
  m.provider_tag = "coarse";
  m.rows = {Embedding{{1.0, 0.0}}, Embedding{{0.0, 1.0}},
            Embedding{{1.0, 0.0}}};
  Embedding q{{1.0, 0.0}};

  auto top1 = top_k(q, m, 1);
  REQUIRE(top1.size() == 1);
  CHECK(top1[0].first == 0);  // tie with chunk 2 broken by lower id
  CHECK(top1[0].second == doctest::Approx(1.0).epsilon(1e-9));

  auto all = top_k(q, m, 5);
  REQUIRE(all.size() == 3);
  CHECK(all[0].first == 0);
  CHECK(all[1].first == 2);
  CHECK(all[2].first == 1);

  Embedding bad{{1.0, 0.0, 0.0}};
  CHECK_THROWS_AS(top_k(bad, m, 1), DimMismatch);
}

TEST_CASE("top_k agrees with a brute-force sort") {
  SyntheticProvider p(21, 8);
  EmbeddingMatrix m;
  m.dim = 8;
  for (int i = 0; i < 200; ++i) m.rows.push_back(p.embed("c" + std::to_string(i)));
  Embedding q = p.embed("the query");

  std::vector<std::pair<ChunkId, double>> full;
  for (ChunkId id = 0; id < m.size(); ++id)
    full.emplace_back(id, dot(q, m.row(id)));
  std::stable_sort(full.begin(), full.end(), [](auto& a, auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  for (std::size_t k : {1, 7, 50, 200}) {
    auto got = top_k(q, m, k);
    REQUIRE(got.size() == std::min(k, m.size()));
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].first == full[i].first);
      CHECK(got[i].second == full[i].second);
    }
  }
}

TEST_CASE("make_provider wires specs and validates them") {
  ProviderSpec spec;
  spec.kind = ProviderKind::Synthetic;
  spec.seed = 1;
  spec.dim = 4;
  auto p = make_provider(spec);
  CHECK(p->embed("q0").values == SyntheticProvider(1, 4).embed("q0").values);
  CHECK(embed_text(spec, "q0").values == p->embed("q0").values);

  spec.dim = 1;
  CHECK_THROWS_AS(make_provider(spec), Error);

  ProviderSpec remote;
  remote.kind = ProviderKind::Remote;
  remote.dim = 4;
  CHECK_THROWS_AS(make_provider(remote), Error);  // endpoint required
}

TEST_CASE("remote provider round-trip against a local server") {
  httplib::Server server;
  std::atomic<int> calls{0};
  server.Post("/embed", [&](const httplib::Request& req,
                            httplib::Response& res) {
    calls.fetch_add(1);
    json body = json::parse(req.body);
    std::size_t dim = body.at("dim").get<std::size_t>();
    json rows = json::array();
    for (const auto& text : body.at("texts")) {
      std::vector<double> v(dim, 0.0);
      // Deterministic non-normalized vector; the client must normalize.
      v[0] = 2.0 + static_cast<double>(text.get<std::string>().size());
      v[1] = 1.0;
      rows.push_back(v);
    }
    res.set_content(json{{"embeddings", rows}}.dump(), "application/json");
  });

  int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread serving([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  RemoteEmbeddingProvider provider(
      "http://127.0.0.1:" + std::to_string(port) + "/embed", 3);
  Embedding v = provider.embed("hi");
  CHECK(norm(v.values) == doctest::Approx(1.0).epsilon(1e-9));
  auto batch = provider.embed_batch({"a", "bcd"});
  REQUIRE(batch.size() == 2);
  CHECK(batch[0].values != batch[1].values);
  CHECK(calls.load() >= 2);

  server.stop();
  serving.join();
}

TEST_CASE("remote provider reports protocol and transport errors") {
  httplib::Server server;
  server.Post("/short", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(json{{"embeddings", json::array()}}.dump(),
                    "application/json");
  });
  server.Post("/boom", [&](const httplib::Request&, httplib::Response& res) {
    res.status = 500;
    res.set_content("no", "text/plain");
  });
  int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread serving([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  std::string base = "http://127.0.0.1:" + std::to_string(port);

  CHECK_THROWS_AS(RemoteEmbeddingProvider(base + "/short", 3).embed("x"),
                  RemoteProtocolError);
  try {
    RemoteEmbeddingProvider(base + "/boom", 3).embed("x");
    CHECK(false);
  } catch (const RemoteUnavailable& e) {
    CHECK(e.status == 500);
  }

  server.stop();
  serving.join();

  CHECK_THROWS_AS(RemoteEmbeddingProvider(base + "/gone", 3).embed("x"),
                  RemoteUnavailable);
}
