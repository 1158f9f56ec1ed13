#include "acebert/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <unordered_map>
#include <unordered_set>

#include "acebert/errors.hpp"

namespace acebert::retrieval {

namespace {

double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

bool ranks_before(const Hit& a, const Hit& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.id < b.id;
}

std::vector<Hit> rank_rows(const EmbeddingIndex& index, std::span<const float> query,
                           const std::vector<std::size_t>& rows, std::size_t k) {
  std::vector<Hit> hits;
  hits.reserve(rows.size());
  for (auto r : rows) hits.push_back({index.ids()[r], dot(index.vector(r), query)});
  const auto n = std::min(k, hits.size());
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(n), hits.end(), ranks_before);
  hits.resize(n);
  return hits;
}

void check_query(const EmbeddingIndex& index, std::span<const float> query) {
  if (index.size() == 0) throw Error("search on an empty index");
  if (query.size() != index.dim()) {
    throw ShapeError("query has dim " + std::to_string(query.size()) + ", index has " + std::to_string(index.dim()));
  }
}

}  // namespace

EmbeddingIndex::EmbeddingIndex(std::vector<std::int64_t> ids, std::vector<float> vectors, std::size_t dim)
    : ids_(std::move(ids)), vectors_(std::move(vectors)), dim_(dim) {
  if (dim_ == 0) throw ShapeError("index dimension must be positive");
  if (vectors_.size() != ids_.size() * dim_) {
    throw ShapeError("index: " + std::to_string(ids_.size()) + " ids but " + std::to_string(vectors_.size()) +
                     " values at dim " + std::to_string(dim_));
  }
  std::unordered_set<std::int64_t> seen;
  for (std::size_t r = 0; r < ids_.size(); ++r) {
    if (!seen.insert(ids_[r]).second) throw Error("index: duplicate id " + std::to_string(ids_[r]));
    const auto v = vector(r);
    if (std::abs(std::sqrt(dot(v, v)) - 1.0) > 1e-4) {
      throw Error("index: vector for id " + std::to_string(ids_[r]) + " is not unit norm");
    }
  }
}

void EmbeddingIndex::build_clusters(std::size_t clusters, std::uint64_t seed, int iterations) {
  if (clusters == 0 || clusters > size()) {
    throw ConfigError("cluster count must be in [1, " + std::to_string(size()) + "]");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> rows(size());
  std::iota(rows.begin(), rows.end(), 0);
  std::shuffle(rows.begin(), rows.end(), rng);
  std::vector<float> c(clusters * dim_);
  for (std::size_t k = 0; k < clusters; ++k) {
    std::copy_n(vectors_.begin() + static_cast<std::ptrdiff_t>(rows[k] * dim_), dim_, c.begin() + k * dim_);
  }
  std::vector<std::size_t> assign(size(), 0);
  const auto nearest = [&](std::span<const float> v) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < clusters; ++k) {
      double d = 0;
      for (std::size_t j = 0; j < dim_; ++j) {
        const double diff = static_cast<double>(v[j]) - c[k * dim_ + j];
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    return best;
  };
  for (int it = 0; it < iterations; ++it) {
    for (std::size_t r = 0; r < size(); ++r) assign[r] = nearest(vector(r));
    std::vector<double> sum(clusters * dim_, 0.0);
    std::vector<std::size_t> count(clusters, 0);
    for (std::size_t r = 0; r < size(); ++r) {
      ++count[assign[r]];
      for (std::size_t j = 0; j < dim_; ++j) sum[assign[r] * dim_ + j] += vectors_[r * dim_ + j];
    }
    for (std::size_t k = 0; k < clusters; ++k) {
      if (count[k] == 0) continue;
      for (std::size_t j = 0; j < dim_; ++j) c[k * dim_ + j] = static_cast<float>(sum[k * dim_ + j] / count[k]);
    }
  }
  for (std::size_t r = 0; r < size(); ++r) assign[r] = nearest(vector(r));
  centroids_ = std::move(c);
  members_.assign(clusters, {});
  for (std::size_t r = 0; r < size(); ++r) members_[assign[r]].push_back(r);
}

std::vector<Hit> exact_topk(const EmbeddingIndex& index, std::span<const float> query, std::size_t k) {
  check_query(index, query);
  if (k > index.size()) {
    throw ConfigError("K=" + std::to_string(k) + " exceeds index size " + std::to_string(index.size()));
  }
  std::vector<std::size_t> rows(index.size());
  std::iota(rows.begin(), rows.end(), 0);
  return rank_rows(index, query, rows, k);
}

std::vector<Hit> approx_topk(const EmbeddingIndex& index, std::span<const float> query, std::size_t k,
                             std::size_t probes) {
  check_query(index, query);
  if (!index.has_clusters()) throw Error("index has no clusters; build them or use exact_topk");
  if (probes < 1 || probes > index.cluster_count()) {
    throw ConfigError("probes must be in [1, " + std::to_string(index.cluster_count()) + "]");
  }
  const auto d = index.dim();
  std::vector<std::pair<double, std::size_t>> order;
  for (std::size_t c = 0; c < index.cluster_count(); ++c) {
    double dist = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = static_cast<double>(query[j]) - index.centroids()[c * d + j];
      dist += diff * diff;
    }
    order.emplace_back(dist, c);
  }
  std::sort(order.begin(), order.end());
  std::vector<std::size_t> rows;
  for (std::size_t p = 0; p < probes; ++p) {
    const auto& m = index.members()[order[p].second];
    rows.insert(rows.end(), m.begin(), m.end());
  }
  return rank_rows(index, query, rows, k);
}

double recall_at_k(std::span<const std::int64_t> returned, const std::set<std::int64_t>& targets) {
  if (targets.empty()) throw Error("recall_at_k: empty target set");
  std::size_t hits = 0;
  for (auto id : returned) hits += targets.count(id);
  return static_cast<double>(hits) / static_cast<double>(targets.size());
}

double gauc(const std::vector<std::vector<Scored>>& groups) {
  double weighted = 0, weight = 0;
  for (const auto& g : groups) {
    std::vector<double> pos, neg;
    for (const auto& s : g) (s.label ? pos : neg).push_back(s.score);
    if (pos.empty() || neg.empty()) continue;
    double wins = 0;
    for (double p : pos) {
      for (double n : neg) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
    }
    const double auc = wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
    weighted += auc * static_cast<double>(g.size());
    weight += static_cast<double>(g.size());
  }
  if (weight == 0) throw Error("gauc: no group has both positive and negative impressions");
  return weighted / weight;
}

EvalSpec build_eval_spec(const std::vector<synth::Click>& clicks) {
  std::map<std::int64_t, std::set<std::int64_t>> targets;
  for (const auto& c : clicks) targets[c.query_id].insert(c.product_id);
  EvalSpec spec;
  for (auto& [qid, t] : targets) {
    spec.query_ids.push_back(qid);
    spec.targets.push_back(std::move(t));
  }
  return spec;
}

EvalReport evaluate(const EmbeddingIndex& index, const std::vector<float>& query_vectors, const EvalSpec& spec,
                    const std::vector<std::size_t>& ks, std::size_t negatives_per_query, std::uint64_t seed) {
  const auto d = index.dim();
  if (query_vectors.size() != spec.query_ids.size() * d) throw ShapeError("evaluate: one query vector per spec query");
  if (spec.query_ids.empty()) throw Error("evaluate: no queries");
  if (ks.empty()) throw ConfigError("evaluate: no K values");
  const std::size_t kmax = std::min(*std::max_element(ks.begin(), ks.end()), index.size());
  std::unordered_map<std::int64_t, std::size_t> row_of;
  for (std::size_t r = 0; r < index.size(); ++r) row_of[index.ids()[r]] = r;

  EvalReport report;
  report.queries = spec.query_ids.size();
  for (auto k : ks) {
    report.recall[k] = 0;
    report.random_recall[k] = 0;
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> any(0, index.size() - 1);
  std::vector<std::vector<Scored>> groups;
  for (std::size_t qi = 0; qi < spec.query_ids.size(); ++qi) {
    const std::span<const float> q(query_vectors.data() + qi * d, d);
    const auto& targets = spec.targets[qi];
    const auto hits = exact_topk(index, q, kmax);
    std::vector<std::int64_t> ids;
    for (const auto& h : hits) ids.push_back(h.id);
    for (auto k : ks) {
      const auto n = std::min(k, ids.size());
      report.recall[k] += recall_at_k(std::span<const std::int64_t>(ids.data(), n), targets);
      report.random_recall[k] += static_cast<double>(std::min(k, index.size())) / static_cast<double>(index.size());
    }
    std::vector<Scored> group;
    for (auto id : targets) {
      const auto it = row_of.find(id);
      if (it == row_of.end()) throw IndexError("evaluate: target " + std::to_string(id) + " is not indexed");
      group.push_back({dot(index.vector(it->second), q), 1});
    }
    if (targets.size() < index.size()) {
      for (std::size_t i = 0; i < negatives_per_query;) {
        const auto r = any(rng);
        if (targets.count(index.ids()[r])) continue;
        group.push_back({dot(index.vector(r), q), 0});
        ++i;
      }
    }
    groups.push_back(std::move(group));
  }
  for (auto k : ks) {
    report.recall[k] /= static_cast<double>(report.queries);
    report.random_recall[k] /= static_cast<double>(report.queries);
  }
  report.gauc = gauc(groups);
  return report;
}

void write_report(std::ostream& out, const EvalReport& report) {
  out << "metric\tK\tvalue\n" << std::setprecision(8);
  for (const auto& [k, v] : report.recall) out << "recall\t" << k << '\t' << v << '\n';
  for (const auto& [k, v] : report.random_recall) out << "random_recall\t" << k << '\t' << v << '\n';
  out << "gauc\t-\t" << report.gauc << '\n';
  out << "queries\t-\t" << report.queries << '\n';
}

void print_summary(std::ostream& out, const EvalReport& report) {
  out << std::fixed << std::setprecision(4);
  out << "queries evaluated: " << report.queries << '\n';
  out << "  K     recall   random\n";
  for (const auto& [k, v] : report.recall) {
    out << "  " << std::left << std::setw(5) << k << ' ' << std::right << std::setw(7) << v << "  " << std::setw(7)
        << report.random_recall.at(k) << '\n';
  }
  out << "GAUC: " << report.gauc << '\n';
  out.unsetf(std::ios::floatfield);
}

double linear_probe_accuracy(const std::vector<float>& a, const std::vector<float>& b, std::size_t dim,
                             std::uint64_t seed, int iterations) {
  if (dim == 0 || a.size() % dim || b.size() % dim) throw ShapeError("probe inputs must be whole rows");
  const std::size_t n = std::min(a.size(), b.size()) / dim;
  if (n < 4) throw Error("probe needs at least 4 rows per class");
  std::mt19937_64 rng(seed);
  const auto pick = [&](const std::vector<float>& src) {
    std::vector<std::size_t> rows(src.size() / dim);
    std::iota(rows.begin(), rows.end(), 0);
    std::shuffle(rows.begin(), rows.end(), rng);
    rows.resize(n);
    return rows;
  };
  const auto ra = pick(a);
  const auto rb = pick(b);
  struct Example {
    const float* x;
    double y;
  };
  std::vector<Example> train, test;
  for (std::size_t i = 0; i < n; ++i) {
    (i < n / 2 ? train : test).push_back({a.data() + ra[i] * dim, 1.0});
    (i < n / 2 ? train : test).push_back({b.data() + rb[i] * dim, 0.0});
  }
  // Standardise with train statistics so plain gradient descent converges
  // at a fixed rate whatever the embedding scale.
  std::vector<double> mean(dim, 0.0), inv_std(dim, 0.0);
  for (const auto& e : train) {
    for (std::size_t j = 0; j < dim; ++j) mean[j] += e.x[j];
  }
  for (auto& m : mean) m /= static_cast<double>(train.size());
  for (const auto& e : train) {
    for (std::size_t j = 0; j < dim; ++j) inv_std[j] += (e.x[j] - mean[j]) * (e.x[j] - mean[j]);
  }
  for (auto& v : inv_std) v = 1.0 / std::max(std::sqrt(v / static_cast<double>(train.size())), 1e-6);
  const auto feature = [&](const Example& e, std::size_t j) { return (e.x[j] - mean[j]) * inv_std[j]; };

  std::vector<double> w(dim, 0.0), grad(dim);
  double bias = 0;
  const double lr = 1.0;
  for (int it = 0; it < iterations; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double gb = 0;
    for (const auto& e : train) {
      double z = bias;
      for (std::size_t j = 0; j < dim; ++j) z += w[j] * feature(e, j);
      const double err = 1.0 / (1.0 + std::exp(-z)) - e.y;
      for (std::size_t j = 0; j < dim; ++j) grad[j] += err * feature(e, j);
      gb += err;
    }
    const double scale = lr / static_cast<double>(train.size());
    for (std::size_t j = 0; j < dim; ++j) w[j] -= scale * grad[j];
    bias -= scale * gb;
  }
  std::size_t correct = 0;
  for (const auto& e : test) {
    double z = bias;
    for (std::size_t j = 0; j < dim; ++j) z += w[j] * feature(e, j);
    correct += (z > 0) == (e.y > 0.5);
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

}  // namespace acebert::retrieval
