#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "acebert/errors.hpp"
#include "acebert/retrieval.hpp"

using namespace acebert;
using namespace acebert::retrieval;

namespace {

std::vector<float> unit_rows(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g;
  std::vector<float> v(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0;
    for (std::size_t j = 0; j < d; ++j) {
      v[i * d + j] = g(rng);
      norm += double(v[i * d + j]) * v[i * d + j];
    }
    for (std::size_t j = 0; j < d; ++j) v[i * d + j] = static_cast<float>(v[i * d + j] / std::sqrt(norm));
  }
  return v;
}

// Unit rows scattered around `centres` well-separated directions.
std::vector<float> clustered_rows(std::size_t n, std::size_t d, std::size_t centres, std::uint64_t seed) {
  const auto c = unit_rows(centres, d, seed + 1000);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, 0.08f);
  std::vector<float> v(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0;
    for (std::size_t j = 0; j < d; ++j) {
      v[i * d + j] = c[(i % centres) * d + j] + g(rng);
      norm += double(v[i * d + j]) * v[i * d + j];
    }
    for (std::size_t j = 0; j < d; ++j) v[i * d + j] = static_cast<float>(v[i * d + j] / std::sqrt(norm));
  }
  return v;
}

std::vector<std::int64_t> ids_for(std::size_t n) {
  std::vector<std::int64_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<std::int64_t>(1000 + 7 * i);
  return ids;
}

std::vector<Hit> brute_force(const EmbeddingIndex& index, std::span<const float> q, std::size_t k) {
  std::vector<Hit> all;
  for (std::size_t r = 0; r < index.size(); ++r) {
    double s = 0;
    for (std::size_t j = 0; j < index.dim(); ++j) s += double(index.vector(r)[j]) * q[j];
    all.push_back({index.ids()[r], s});
  }
  std::sort(all.begin(), all.end(), [](const Hit& a, const Hit& b) {
    return a.score != b.score ? a.score > b.score : a.id < b.id;
  });
  all.resize(k);
  return all;
}

// Area under the ROC curve by trapezoids over the score-sorted list, tied
// scores stepping diagonally.
double roc_auc(std::vector<Scored> g) {
  std::sort(g.begin(), g.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
  double p = 0, n = 0;
  for (const auto& s : g) (s.label ? p : n) += 1;
  double tpr = 0, fpr = 0, area = 0;
  for (std::size_t i = 0; i < g.size();) {
    std::size_t j = i;
    double dp = 0, dn = 0;
    while (j < g.size() && g[j].score == g[i].score) (g[j++].label ? dp : dn) += 1;
    const double ntpr = tpr + dp / p, nfpr = fpr + dn / n;
    area += (nfpr - fpr) * (tpr + ntpr) / 2;
    tpr = ntpr;
    fpr = nfpr;
    i = j;
  }
  return area;
}

}  // namespace

TEST(Index, RejectsDuplicatesAndNonUnitRows) {
  auto v = unit_rows(3, 4, 1);
  EXPECT_THROW(EmbeddingIndex({1, 2, 1}, v, 4), Error);
  v[0] *= 2;
  EXPECT_THROW(EmbeddingIndex({1, 2, 3}, v, 4), Error);
  EXPECT_THROW(EmbeddingIndex({1, 2}, unit_rows(3, 4, 1), 4), ShapeError);
}

TEST(ExactTopK, MatchesBruteForce) {
  const std::size_t n = 300, d = 16;
  const EmbeddingIndex index(ids_for(n), unit_rows(n, d, 2), d);
  const auto queries = unit_rows(20, d, 3);
  for (std::size_t q = 0; q < 20; ++q) {
    const std::span<const float> qv(queries.data() + q * d, d);
    EXPECT_EQ(exact_topk(index, qv, 25), brute_force(index, qv, 25));
  }
}

TEST(ExactTopK, TiesBreakByAscendingId) {
  std::vector<float> v = {1, 0, 1, 0, 0, 1};
  const EmbeddingIndex index({9, 4, 6}, v, 2);
  const std::vector<float> q = {1, 0};
  const auto hits = exact_topk(index, q, 3);
  EXPECT_EQ(hits[0].id, 4);
  EXPECT_EQ(hits[1].id, 9);
  EXPECT_EQ(hits[2].id, 6);
}

TEST(ExactTopK, KBeyondSizeIsAnError) {
  const EmbeddingIndex index(ids_for(5), unit_rows(5, 4, 1), 4);
  const std::vector<float> q(4, 0.5f);
  EXPECT_THROW(exact_topk(index, q, 6), ConfigError);
  EXPECT_THROW(exact_topk(index, std::vector<float>(3, 0.5f), 2), ShapeError);
}

TEST(ApproxTopK, AllProbesEqualsExact) {
  const std::size_t n = 400, d = 16;
  EmbeddingIndex index(ids_for(n), unit_rows(n, d, 4), d);
  index.build_clusters(10, 1);
  std::size_t members = 0;
  for (const auto& m : index.members()) members += m.size();
  EXPECT_EQ(members, n);
  const auto queries = unit_rows(10, d, 5);
  for (std::size_t q = 0; q < 10; ++q) {
    const std::span<const float> qv(queries.data() + q * d, d);
    EXPECT_EQ(approx_topk(index, qv, 10, 10), exact_topk(index, qv, 10));
  }
}

TEST(ApproxTopK, FewProbesRecoverClusteredNeighbours) {
  const std::size_t n = 800, d = 16;
  EmbeddingIndex index(ids_for(n), clustered_rows(n, d, 16, 6), d);
  index.build_clusters(16, 2);
  const auto queries = clustered_rows(32, d, 16, 7);
  double overlap = 0;
  for (std::size_t q = 0; q < 32; ++q) {
    const std::span<const float> qv(queries.data() + q * d, d);
    const auto exact = exact_topk(index, qv, 10), approx = approx_topk(index, qv, 10, 2);
    for (const auto& h : approx) overlap += std::count(exact.begin(), exact.end(), h);
  }
  EXPECT_GE(overlap / (32 * 10), 0.9);
}

TEST(ApproxTopK, NeedsClustersAndValidProbes) {
  EmbeddingIndex index(ids_for(20), unit_rows(20, 4, 1), 4);
  const std::vector<float> q = {1, 0, 0, 0};
  EXPECT_THROW(approx_topk(index, q, 3, 1), Error);
  index.build_clusters(4, 1);
  EXPECT_THROW(approx_topk(index, q, 3, 5), ConfigError);
  EXPECT_THROW(index.build_clusters(21, 1), ConfigError);
}

TEST(Recall, SetArithmetic) {
  const std::vector<std::int64_t> returned = {1, 2, 3, 4, 5};
  EXPECT_DOUBLE_EQ(recall_at_k(returned, {2, 9}), 0.5);
  EXPECT_DOUBLE_EQ(recall_at_k(returned, {1, 2, 3}), 1.0);
  EXPECT_DOUBLE_EQ(recall_at_k(returned, {7}), 0.0);
  EXPECT_THROW(recall_at_k(returned, {}), Error);
}

TEST(Recall, RandomOracleAgreement) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 100; ++t) {
    std::vector<std::int64_t> returned;
    std::set<std::int64_t> targets;
    for (int i = 0; i < 20; ++i) returned.push_back(static_cast<std::int64_t>(rng() % 50));
    std::sort(returned.begin(), returned.end());
    returned.erase(std::unique(returned.begin(), returned.end()), returned.end());
    for (int i = 0; i < 8; ++i) targets.insert(static_cast<std::int64_t>(rng() % 50));
    std::vector<std::int64_t> inter;
    std::set_intersection(returned.begin(), returned.end(), targets.begin(), targets.end(), std::back_inserter(inter));
    EXPECT_DOUBLE_EQ(recall_at_k(returned, targets), double(inter.size()) / double(targets.size()));
  }
}

TEST(Recall, MonotoneInK) {
  const std::size_t n = 200, d = 8;
  const EmbeddingIndex index(ids_for(n), unit_rows(n, d, 8), d);
  const auto q = unit_rows(1, d, 9);
  const std::set<std::int64_t> targets = {1000, 1070, 1700, 2393};
  const auto hits = exact_topk(index, q, n);
  std::vector<std::int64_t> ids;
  for (const auto& h : hits) ids.push_back(h.id);
  double previous = 0;
  for (std::size_t k = 1; k <= n; ++k) {
    const double r = recall_at_k(std::span<const std::int64_t>(ids.data(), k), targets);
    EXPECT_GE(r, previous);
    previous = r;
  }
  EXPECT_DOUBLE_EQ(previous, 1.0);
}

TEST(Gauc, MatchesRocIntegration) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> size(2, 40), coarse(0, 6);
  std::normal_distribution<double> g;
  for (int set = 0; set < 50; ++set) {
    std::vector<std::vector<Scored>> groups(1 + rng() % 8);
    double weighted = 0, weight = 0;
    for (auto& grp : groups) {
      const int m = size(rng);
      for (int i = 0; i < m; ++i) {
        const int label = static_cast<int>(rng() % 3 == 0);
        // Coarse scores on some sets exercise ties.
        const double s = set % 2 ? coarse(rng) + label : g(rng) + label;
        grp.push_back({s, label});
      }
      grp[0].label = 1;
      grp[1].label = 0;
      weighted += roc_auc(grp) * m;
      weight += m;
    }
    EXPECT_NEAR(gauc(groups), weighted / weight, 1e-9);
  }
}

TEST(Gauc, SimpleCases) {
  EXPECT_DOUBLE_EQ(gauc({{{0.9, 1}, {0.1, 0}}}), 1.0);
  EXPECT_DOUBLE_EQ(gauc({{{0.1, 1}, {0.9, 0}}}), 0.0);
  EXPECT_DOUBLE_EQ(gauc({{{0.5, 1}, {0.5, 0}}}), 0.5);
  // Group of 2 at AUC 1 and group of 4 at AUC 0: weights 2 and 4.
  EXPECT_DOUBLE_EQ(gauc({{{1, 1}, {0, 0}}, {{0, 1}, {1, 0}, {1, 0}, {1, 0}}}), 2.0 / 6.0);
  // Single-label groups are skipped.
  EXPECT_DOUBLE_EQ(gauc({{{1, 1}, {0, 0}}, {{0.3, 1}, {0.2, 1}}}), 1.0);
  EXPECT_THROW(gauc({{{1, 1}}}), Error);
}

TEST(Gauc, InvariantUnderMonotoneTransform) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  std::vector<std::vector<Scored>> a(5), b(5);
  for (std::size_t k = 0; k < 5; ++k) {
    for (int i = 0; i < 30; ++i) {
      const int label = i % 4 == 0;
      const double s = g(rng) + label;
      a[k].push_back({s, label});
      b[k].push_back({std::exp(3 * s) + 2, label});
    }
  }
  EXPECT_NEAR(gauc(a), gauc(b), 1e-12);
}

TEST(Evaluate, PerfectEmbeddingsHitEverything) {
  // Queries identical to their single target product.
  const std::size_t n = 60, d = 8;
  const auto v = unit_rows(n, d, 12);
  const EmbeddingIndex index(ids_for(n), v, d);
  EvalSpec spec;
  std::vector<float> qv;
  for (std::size_t i = 0; i < 10; ++i) {
    spec.query_ids.push_back(static_cast<std::int64_t>(i));
    spec.targets.push_back({index.ids()[i * 3]});
    qv.insert(qv.end(), v.begin() + i * 3 * d, v.begin() + (i * 3 + 1) * d);
  }
  const auto report = evaluate(index, qv, spec, {1, 10}, 20, 1);
  EXPECT_DOUBLE_EQ(report.recall.at(1), 1.0);
  EXPECT_DOUBLE_EQ(report.gauc, 1.0);
  EXPECT_DOUBLE_EQ(report.random_recall.at(10), 10.0 / n);
  EXPECT_EQ(report.queries, 10u);
}

TEST(Evaluate, SpecGroupsClicksByQuery) {
  const std::vector<synth::Click> clicks = {{5, 1, 8, 1}, {2, 3, 9, 2}, {5, 4, 9, 1}, {5, 1, 9, 1}};
  const auto spec = build_eval_spec(clicks);
  EXPECT_EQ(spec.query_ids, (std::vector<std::int64_t>{2, 5}));
  EXPECT_EQ(spec.targets[1], (std::set<std::int64_t>{1, 4}));
}

TEST(Evaluate, ReportFormat) {
  EvalReport r;
  r.recall[10] = 0.5;
  r.random_recall[10] = 0.005;
  r.gauc = 0.75;
  r.queries = 3;
  std::ostringstream out;
  write_report(out, r);
  EXPECT_EQ(out.str(), "metric\tK\tvalue\nrecall\t10\t0.5\nrandom_recall\t10\t0.005\ngauc\t-\t0.75\nqueries\t-\t3\n");
}

TEST(Probe, SeparableAndIdenticalSets) {
  const std::size_t d = 8;
  auto a = unit_rows(200, d, 1), b = unit_rows(200, d, 2);
  for (std::size_t i = 0; i < 200; ++i) {
    a[i * d] = std::abs(a[i * d]) + 0.5f;
    b[i * d] = -std::abs(b[i * d]) - 0.5f;
  }
  EXPECT_GE(linear_probe_accuracy(a, b, d, 1), 0.99);
  const auto same = unit_rows(400, d, 3);
  const std::vector<float> first(same.begin(), same.begin() + 200 * d), second(same.begin() + 200 * d, same.end());
  EXPECT_NEAR(linear_probe_accuracy(first, second, d, 1), 0.5, 0.12);
}
