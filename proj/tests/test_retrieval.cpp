#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "multibert/common.hpp"
#include "multibert/retrieval.hpp"
#include "test_util.hpp"

using namespace multibert;
using namespace multibert::retrieval;

namespace {

EmbeddingIndex random_index(std::uint64_t seed, std::size_t n, std::size_t dim) {
  Rng rng(seed);
  std::vector<std::string> ids;
  std::vector<float> m;
  for (std::size_t i = 0; i < n; ++i) {
    ids.push_back("b" + std::to_string(i));
    for (std::size_t j = 0; j < dim; ++j) m.push_back(static_cast<float>(rng.normal()));
  }
  return EmbeddingIndex(ids, dim, m);
}

// Exhaustive scan with an explicit comparator, independent of rank().
std::vector<ScoredId> scan_oracle(const EmbeddingIndex& index, const std::string& query, std::size_t k) {
  std::size_t q = *index.find(query);
  auto qr = index.row(q);
  std::vector<ScoredId> all;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (i == q) continue;
    auto r = index.row(i);
    double dot = 0, nq = 0, nr = 0;
    for (std::size_t j = 0; j < index.dim(); ++j) {
      dot += double(qr[j]) * r[j];
      nq += double(qr[j]) * qr[j];
      nr += double(r[j]) * r[j];
    }
    if (nr == 0) continue;
    all.push_back({index.ids()[i], std::clamp(dot / (std::sqrt(nq) * std::sqrt(nr)), -1.0, 1.0)});
  }
  std::stable_sort(all.begin(), all.end(), [](const ScoredId& a, const ScoredId& b) {
    return a.score > b.score || (a.score == b.score && a.book_id < b.book_id);
  });
  if (all.size() > k) all.resize(k);
  return all;
}

// Three groups of unit-ish vectors around orthogonal axes.
EmbeddingIndex three_groups(std::uint64_t seed, std::size_t per_group, std::vector<int>* group = nullptr) {
  Rng rng(seed);
  std::vector<std::string> ids;
  std::vector<float> m;
  for (int g = 0; g < 3; ++g) {
    for (std::size_t i = 0; i < per_group; ++i) {
      ids.push_back("g" + std::to_string(g) + "-" + std::to_string(i));
      for (int j = 0; j < 6; ++j) m.push_back(static_cast<float>((j == 2 * g ? 10.0 : 0.0) + 0.5 * rng.normal()));
      if (group) group->push_back(g);
    }
  }
  return EmbeddingIndex(ids, 6, m);
}

}  // namespace

// ---- cosine -------------------------------------------------------------------

TEST(Cosine, SelfIsOne) {
  std::vector<float> x = {0.3f, -2.0f, 7.5f};
  EXPECT_DOUBLE_EQ(cosine(x, x), 1.0);
}

TEST(Cosine, OrthogonalIsZero) {
  std::vector<float> a = {1, 0, 0}, b = {0, 1, 0};
  EXPECT_EQ(cosine(a, b), 0.0);
}

TEST(Cosine, HandArithmetic) {
  // dot 4, norms 3 and sqrt(5).
  std::vector<float> a = {1, 2, 2}, b = {2, 0, 1};
  EXPECT_NEAR(cosine(a, b), 4.0 / (3.0 * std::sqrt(5.0)), 1e-15);
  EXPECT_NEAR(cosine(a, b), 0.596, 5e-4);
}

TEST(Cosine, ErrorsAndClamp) {
  std::vector<float> z = {0, 0}, a = {1, 2}, c = {1, 2, 3};
  EXPECT_EQ(mbtest::error_kind_of([&] { cosine(z, a); }), ErrorKind::kUndefinedSimilarity);
  EXPECT_EQ(mbtest::error_kind_of([&] { cosine(a, c); }), ErrorKind::kShape);
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    std::vector<float> x(5);
    for (auto& v : x) v = static_cast<float>(rng.normal());
    auto y = x;
    for (auto& v : y) v *= 3.7f;
    double s = cosine(x, y);
    EXPECT_LE(s, 1.0);
    EXPECT_GE(s, 0.999999);
  }
}

// ---- index --------------------------------------------------------------------

TEST(Index, NormsAndLookup) {
  EmbeddingIndex idx({"a", "b"}, 2, {3, 4, 0, 0});
  EXPECT_NEAR(idx.norm(0), 5.0, 1e-6);
  EXPECT_EQ(idx.norm(1), 0.0);
  EXPECT_EQ(idx.find("b"), 1u);
  EXPECT_FALSE(idx.find("c"));
  EXPECT_EQ(mbtest::error_kind_of([&] { EmbeddingIndex({"a", "a"}, 1, {1, 2}); }), ErrorKind::kContract);
  EXPECT_EQ(mbtest::error_kind_of([&] { EmbeddingIndex({"a"}, 2, {1, 2, 3}); }), ErrorKind::kContract);
}

// ---- top_k --------------------------------------------------------------------

TEST(TopK, CorpusOfTwo) {
  EmbeddingIndex idx({"a", "b"}, 2, {1, 0, 1, 1});
  auto r = top_k(idx, "a", 1);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].book_id, "b");
  EXPECT_EQ(top_k(idx, "a", 10).size(), 1u);
}

TEST(TopK, DuplicatesTieByBookId) {
  EmbeddingIndex idx({"q", "zeta", "alpha", "mid"}, 2, {1, 1, 1, 1, 1, 1, 1, -1});
  auto r = top_k(idx, "q", 3);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r[0].book_id, "alpha");
  EXPECT_EQ(r[1].book_id, "zeta");
  EXPECT_DOUBLE_EQ(r[0].score, 1.0);
  EXPECT_DOUBLE_EQ(r[1].score, 1.0);
  EXPECT_EQ(r[2].book_id, "mid");
}

TEST(TopK, MatchesBruteForceOracle) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto idx = random_index(seed, 1000, 16);
    for (const char* q : {"b0", "b517", "b999"}) EXPECT_EQ(top_k(idx, q, 25), scan_oracle(idx, q, 25)) << seed << q;
  }
}

TEST(TopK, MatchesOracleWithManyTies) {
  // Integer vectors from a tiny alphabet produce exact score ties.
  Rng rng(3);
  std::vector<std::string> ids;
  std::vector<float> m;
  for (int i = 0; i < 300; ++i) {
    ids.push_back("t" + std::to_string(rng.below(100000)) + "-" + std::to_string(i));
    for (int j = 0; j < 3; ++j) m.push_back(static_cast<float>(rng.below(3)));
  }
  m[0] = m[1] = m[2] = 1;
  EmbeddingIndex idx(ids, 3, m);
  for (std::size_t q : {0u, 10u, 299u}) {
    if (idx.norm(q) == 0) continue;
    EXPECT_EQ(top_k(idx, ids[q], 40), scan_oracle(idx, ids[q], 40));
  }
}

TEST(TopK, ScoresAreBoundedAndNonIncreasing) {
  auto idx = random_index(4, 200, 8);
  for (std::size_t q = 0; q < 200; q += 17) {
    auto r = top_k(idx, idx.ids()[q], 30);
    for (std::size_t i = 0; i < r.size(); ++i) {
      EXPECT_LE(std::abs(r[i].score), 1.0);
      if (i) {
        EXPECT_LE(r[i].score, r[i - 1].score);
      }
      EXPECT_NE(r[i].book_id, idx.ids()[q]);
    }
  }
}

TEST(TopK, ZeroRowsAreSkippedAndZeroQueryIsUndefined) {
  EmbeddingIndex idx({"a", "z", "b"}, 2, {1, 0, 0, 0, 0, 1});
  auto r = top_k(idx, "a", 5);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].book_id, "b");
  EXPECT_EQ(mbtest::error_kind_of([&] { top_k(idx, "z", 1); }), ErrorKind::kUndefinedSimilarity);
}

TEST(TopK, UnknownQueryIsNotFound) {
  auto idx = random_index(5, 10, 4);
  EXPECT_EQ(mbtest::error_kind_of([&] { top_k(idx, "nope", 3); }), ErrorKind::kNotFound);
}

TEST(TopK, DeterministicAcrossCalls) {
  auto idx = random_index(6, 300, 12);
  EXPECT_EQ(top_k(idx, "b7", 20), top_k(idx, "b7", 20));
}

// ---- cluster index --------------------------------------------------------------

TEST(ClusterIndex, DefaultCountIsCeilSqrt) {
  EXPECT_EQ(default_cluster_count(1), 1u);
  EXPECT_EQ(default_cluster_count(2), 2u);
  EXPECT_EQ(default_cluster_count(16), 4u);
  EXPECT_EQ(default_cluster_count(17), 5u);
  EXPECT_EQ(default_cluster_count(500), 23u);
}

TEST(ClusterIndex, EveryIdInExactlyOneCluster) {
  auto idx = random_index(7, 120, 5);
  build_cluster_index(idx, {0, 1});
  const auto& ci = *idx.clusters();
  EXPECT_EQ(ci.members.size(), 11u);
  std::vector<int> seen(120, 0);
  for (std::size_t c = 0; c < ci.members.size(); ++c) {
    for (auto i : ci.members[c]) {
      ++seen[i];
      EXPECT_EQ(ci.cluster_of[i], c);
    }
  }
  for (int s : seen) EXPECT_EQ(s, 1);
}

TEST(ClusterIndex, SingletonAndSingleCluster) {
  auto idx = random_index(8, 12, 4);
  build_cluster_index(idx, {12, 0});
  for (const auto& m : idx.clusters()->members) EXPECT_EQ(m.size(), 1u);
  build_cluster_index(idx, {1, 0});
  EXPECT_EQ(idx.clusters()->members[0].size(), 12u);
}

TEST(ClusterIndex, RecoversGeneratingGroups) {
  std::vector<int> group;
  auto idx = three_groups(9, 40, &group);
  build_cluster_index(idx, {3, 2});
  const auto& ci = *idx.clusters();
  for (std::size_t i = 0; i < group.size(); ++i) {
    for (std::size_t j = 0; j < group.size(); ++j) {
      EXPECT_EQ(group[i] == group[j], ci.cluster_of[i] == ci.cluster_of[j]);
    }
  }
}

TEST(ClusterIndex, TooManyClustersIsConfigError) {
  auto idx = random_index(10, 5, 3);
  EXPECT_EQ(mbtest::error_kind_of([&] { build_cluster_index(idx, {6, 0}); }), ErrorKind::kConfig);
}

// ---- cluster retrieval ----------------------------------------------------------

TEST(ClusterRetrieve, SingletonClustersSpillToGlobalTopK) {
  auto idx = random_index(11, 30, 4);
  build_cluster_index(idx, {30, 0});
  for (std::size_t q = 0; q < 30; q += 7) {
    EXPECT_EQ(cluster_retrieve(idx, idx.ids()[q], 30), top_k(idx, idx.ids()[q], 30));
  }
}

TEST(ClusterRetrieve, OneClusterEqualsTopK) {
  auto idx = random_index(12, 50, 6);
  build_cluster_index(idx, {1, 0});
  for (std::size_t q = 0; q < 50; q += 9) {
    EXPECT_EQ(cluster_retrieve(idx, idx.ids()[q], 10), top_k(idx, idx.ids()[q], 10));
  }
}

TEST(ClusterRetrieve, StaysInsideTheQueryGroup) {
  std::vector<int> group;
  auto idx = three_groups(13, 40, &group);
  build_cluster_index(idx, {3, 2});
  for (std::size_t q = 0; q < group.size(); q += 5) {
    auto r = cluster_retrieve(idx, idx.ids()[q], 25);
    ASSERT_EQ(r.size(), 25u);
    for (const auto& s : r) EXPECT_EQ(group[*idx.find(s.book_id)], group[q]);
  }
}

TEST(ClusterRetrieve, SpillFillsUpToKAndRecallIsMeasured) {
  auto idx = random_index(14, 200, 6);
  build_cluster_index(idx, {20, 3});
  double total = 0;
  for (std::size_t q = 0; q < 200; q += 10) {
    auto approx = cluster_retrieve(idx, idx.ids()[q], 15);
    auto exact = top_k(idx, idx.ids()[q], 15);
    EXPECT_EQ(approx.size(), 15u);
    std::set<std::string> ids;
    for (const auto& s : approx) ids.insert(s.book_id);
    EXPECT_EQ(ids.size(), approx.size());
    double r = recall(approx, exact);
    EXPECT_GE(r, 0.0);
    EXPECT_LE(r, 1.0);
    total += r;
  }
  EXPECT_GT(total / 20.0, 0.3);
}

TEST(ClusterRetrieve, Errors) {
  auto idx = random_index(15, 10, 3);
  EXPECT_EQ(mbtest::error_kind_of([&] { cluster_retrieve(idx, "b1", 3); }), ErrorKind::kContract);
  build_cluster_index(idx, {2, 0});
  EXPECT_EQ(mbtest::error_kind_of([&] { cluster_retrieve(idx, "x", 3); }), ErrorKind::kNotFound);
}

// ---- helpers ------------------------------------------------------------------

TEST(Recall, Fractions) {
  std::vector<ScoredId> exact = {{"a", 1}, {"b", 0.5}, {"c", 0.1}, {"d", 0}};
  EXPECT_EQ(recall({{"b", 0}, {"d", 0}, {"x", 0}}, exact), 0.5);
  EXPECT_EQ(recall({}, {}), 1.0);
}

TEST(FormatResults, TabSeparatedWithOptionalTitles) {
  std::vector<ScoredId> r = {{"a", 0.123456789123}, {"b", -1.0}};
  EXPECT_EQ(format_results(r), "1\ta\t0.123456789\n2\tb\t-1\n");
  std::map<std::string, std::string> titles = {{"a", "Alpha"}};
  EXPECT_EQ(format_results(r, &titles), "1\ta\t0.123456789\tAlpha\n2\tb\t-1\t\n");
}
