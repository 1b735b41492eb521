#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "invar/common.hpp"
#include "invar/scoring.hpp"

using namespace invar;

namespace {

using Scores = std::vector<std::pair<ChunkId, double>>;

Scores shifted(const Scores& scores, double c) {
  Scores out = scores;
  for (auto& [id, s] : out) s += c;
  return out;
}

}  // namespace

TEST_CASE("raw_score is the exact dot product") {
  Embedding a{{0.6, 0.8}};
  Embedding b{{0.8, 0.6}};
  CHECK(raw_score(a, b) == doctest::Approx(0.96).epsilon(1e-12));
  CHECK(raw_score(a, a) == doctest::Approx(1.0).epsilon(1e-9));
  Embedding e1{{1.0, 0.0}};
  Embedding e2{{0.0, 1.0}};
  CHECK(raw_score(e1, e2) == doctest::Approx(0.0).epsilon(1e-9));
  Embedding c{{1.0, 0.0, 0.0}};
  CHECK_THROWS_AS(raw_score(a, c), DimMismatch);
}

TEST_CASE("renormalize_topk softmax values") {
  Scores equal{{0, 1.0}, {1, 1.0}};
  RelevanceDistribution d = renormalize_topk(equal, 2);
  REQUIRE(d.support.size() == 2);
  CHECK(d.support == std::vector<ChunkId>{0, 1});  // tie -> ascending id
  CHECK(d.probs[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(d.probs[1] == doctest::Approx(0.5).epsilon(1e-12));

  Scores gap{{0, 1.0}, {1, 0.0}};
  d = renormalize_topk(gap, 2);
  CHECK(d.support == std::vector<ChunkId>{0, 1});
  CHECK(d.probs[0] == doctest::Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(d.probs[1] == doctest::Approx(0.2689414213699951).epsilon(1e-12));

  // Chunk 2 falls outside the top-2 cut before the softmax.
  Scores three{{0, 1.0}, {1, 0.0}, {2, -1.0}};
  d = renormalize_topk(three, 2);
  CHECK(d.support == std::vector<ChunkId>{0, 1});
  CHECK(d.probs[0] == doctest::Approx(0.7310585786300049).epsilon(1e-12));
}

TEST_CASE("renormalize_topk selection rules") {
  // Tie at the k-boundary admits the lower chunk_id.
  Scores tie{{5, 2.0}, {3, 1.0}, {9, 1.0}};
  RelevanceDistribution d = renormalize_topk(tie, 2);
  CHECK(d.support == std::vector<ChunkId>{5, 3});

  // k >= n equals the full softmax.
  Scores all{{0, 0.3}, {1, -0.2}, {2, 1.1}};
  RelevanceDistribution full = renormalize_topk(all, 3);
  RelevanceDistribution big = renormalize_topk(all, 10);
  CHECK(full.support == big.support);
  for (std::size_t i = 0; i < full.probs.size(); ++i)
    CHECK(full.probs[i] == big.probs[i]);

  // Argmax stability: top-1 support entry is the raw-score argmax.
  CHECK(full.support[0] == 2);
}

TEST_CASE("renormalize_topk input validation") {
  Scores empty;
  CHECK_THROWS_AS(renormalize_topk(empty, 2), Error);
  Scores dup{{4, 1.0}, {4, 0.5}};
  CHECK_THROWS_AS(renormalize_topk(dup, 2), Error);
  Scores nan{{0, 1.0}, {1, std::numeric_limits<double>::quiet_NaN()}};
  try {
    renormalize_topk(nan, 2);
    CHECK(false);
  } catch (const NonFiniteScore& e) {
    CHECK(e.chunk_id == 1);
  }
}

TEST_CASE("renormalize_topk sums to one and is shift invariant") {
  SplitMix64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    Scores scores;
    std::size_t n = 2 + rng.next() % 12;
    for (ChunkId id = 0; id < n; ++id)
      scores.emplace_back(id, (rng.uniform() - 0.5) * 20.0);
    std::size_t k = 2 + rng.next() % n;

    RelevanceDistribution d = renormalize_topk(scores, k);
    CHECK(pairwise_sum(d.probs) == doctest::Approx(1.0).epsilon(1e-9));
    for (double p : d.probs) CHECK(p > 0.0);

    RelevanceDistribution s = renormalize_topk(shifted(scores, 123.25), k);
    REQUIRE(s.support == d.support);
    for (std::size_t i = 0; i < d.probs.size(); ++i)
      CHECK(std::abs(s.probs[i] - d.probs[i]) < 1e-12);
  }
}

TEST_CASE("kl_divergence values") {
  RelevanceDistribution p{{0, 1}, {0.7310585786300049, 0.2689414213699951}};
  RelevanceDistribution u{{0, 1}, {0.5, 0.5}};

  CHECK(kl_divergence(p, p) == doctest::Approx(0.0).epsilon(1e-12));
  // Direct-evaluation constants for the softmax([1,0]) vs uniform pair.
  CHECK(kl_divergence(u, p) ==
        doctest::Approx(0.12011450695827758).epsilon(1e-12));
  CHECK(kl_divergence(p, u) ==
        doctest::Approx(0.11094407167172735).epsilon(1e-12));

  RelevanceDistribution other{{0, 2}, {0.5, 0.5}};
  CHECK_THROWS_AS(kl_divergence(p, other), SupportMismatch);
  RelevanceDistribution shorter{{0}, {1.0}};
  CHECK_THROWS_AS(kl_divergence(p, shorter), SupportMismatch);
}

TEST_CASE("kl_divergence ignores support ordering") {
  RelevanceDistribution p{{2, 0}, {0.3, 0.7}};
  RelevanceDistribution q{{0, 2}, {0.6, 0.4}};
  // p sorted by id is (0.7, 0.3); q is (0.6, 0.4).
  double expected = 0.7 * std::log(0.7 / 0.6) + 0.3 * std::log(0.3 / 0.4);
  CHECK(kl_divergence(p, q) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("kl_divergence is non-negative, zero only at equality") {
  SplitMix64 rng(23);
  for (int trial = 0; trial < 500; ++trial) {
    std::size_t n = 2 + rng.next() % 6;
    Scores sa, sb;
    for (ChunkId id = 0; id < n; ++id) {
      sa.emplace_back(id, (rng.uniform() - 0.5) * 8.0);
      sb.emplace_back(id, (rng.uniform() - 0.5) * 8.0);
    }
    RelevanceDistribution a = renormalize_topk(sa, n);
    RelevanceDistribution b = renormalize_topk(sb, n);
    double kl = kl_divergence(a, b);
    CHECK(kl >= 0.0);
    bool same = true;
    // Compare aligned by chunk_id.
    for (std::size_t i = 0; i < n; ++i) {
      double pa = a.probs[i];
      for (std::size_t j = 0; j < n; ++j) {
        if (b.support[j] == a.support[i] &&
            std::abs(b.probs[j] - pa) > 1e-12) {
          same = false;
        }
      }
    }
    if (kl == doctest::Approx(0.0).epsilon(1e-12)) {
      CHECK(same);
    }
    if (same) CHECK(kl < 1e-10);
  }
}
